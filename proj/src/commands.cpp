#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dumamba/cli.hpp"
#include "dumamba/study.hpp"
#include "dumamba/tensor.hpp"

#ifndef DUMAMBA_BUILD_ID
#define DUMAMBA_BUILD_ID "unknown"
#endif

DUMAMBA_BEGIN_NAMESPACE

namespace {

namespace fs = std::filesystem;
using cli::Options;

struct Failure {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, const std::string& message) { throw Failure{code, message}; }

nlohmann::json provenance(const Options& opt, const nlohmann::json& config, std::uint64_t seed) {
  return {{"tool", "dumamba"},
          {"command", opt.command},
          {"build", DUMAMBA_BUILD_ID},
          {"precision", precision_name()},
          {"seed", seed},
          {"config", config}};
}

/// "# key: value" lines that open every CSV the tool writes.
std::string csv_header(const nlohmann::json& prov) {
  std::ostringstream os;
  os << "# build: " << prov.at("build").get<std::string>() << '\n'
     << "# precision: " << prov.at("precision").get<std::string>() << '\n'
     << "# seed: " << prov.at("seed").get<std::uint64_t>() << '\n'
     << "# config: " << prov.at("config").dump() << '\n';
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(cli::kExitData, "cannot write '" + path.string() + "'");
  os << text;
  if (!os) fail(cli::kExitData, "failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path require_out(const Options& opt) {
  if (opt.out.empty()) fail(cli::kExitUsage, opt.command + " needs --out DIR");
  std::error_code ec;
  fs::create_directories(opt.out, ec);
  if (ec) fail(cli::kExitData, "cannot create '" + opt.out + "': " + ec.message());
  return opt.out;
}

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) fail(cli::kExitUsage, std::string("missing ") + flag);
  if (!fs::is_regular_file(path)) fail(cli::kExitData, "'" + path + "' does not exist");
}

/// Effective training configuration: defaults, then the config file, then flags.
TrainConfig load_config(const Options& opt) {
  TrainConfig cfg;
  if (!opt.config.empty()) {
    require_file(opt.config, "--config");
    std::ifstream is(opt.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
      cfg = TrainConfig::from_json(j);
    } catch (const nlohmann::json::exception& e) {
      fail(cli::kExitUsage, "config '" + opt.config + "': " + e.what());
    } catch (const Error& e) {
      fail(cli::kExitUsage, "config '" + opt.config + "': " + e.what());
    }
  }
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.model.seed = *opt.seed;
  }
  if (opt.epochs) cfg.epochs = *opt.epochs;
  if (opt.lr) cfg.optim.lr = *opt.lr;
  try {
    cfg.model.validate();
  } catch (const Error& e) {
    fail(cli::kExitUsage, e.what());
  }
  if (cfg.epochs < 0) fail(cli::kExitUsage, "epochs must be >= 0");
  return cfg;
}

std::vector<data::VolumeSample> load_data(const Options& opt, Index classes) {
  require_file(opt.manifest, "--manifest");
  try {
    auto samples = data::load_dataset(opt.manifest);
    for (const auto& s : samples) s.validate(classes);
    return samples;
  } catch (const Error& e) {
    fail(cli::kExitData, e.what());
  }
}

struct Loaded {
  Checkpoint ckpt;
  Model model;
};

Loaded load_model(const Options& opt) {
  require_file(opt.checkpoint, "--checkpoint");
  try {
    Loaded l{load_checkpoint(opt.checkpoint), {}};
    l.model = model_from_checkpoint(l.ckpt);
    return l;
  } catch (const Error& e) {
    fail(cli::kExitData, e.what());
  }
}

void check_compatible(const Model& model, const std::vector<data::VolumeSample>& samples) {
  const auto& p = model.config.patch;
  for (const auto& s : samples) {
    if (s.image.dim(0) != model.config.in_channels || s.extent != p) {
      fail(cli::kExitData, "sample '" + s.id + "' " + shape_str(s.image.shape()) +
                               " does not fit the checkpoint's input of " +
                               std::to_string(model.config.in_channels) + " channels on " +
                               std::to_string(p[0]) + "x" + std::to_string(p[1]) + "x" +
                               std::to_string(p[2]));
    }
  }
}

std::uint64_t checkpoint_seed(const Options& opt, const Checkpoint& ck) {
  if (opt.seed) return *opt.seed;
  return ck.meta.value("seed", ck.config.seed);
}

void say(const Options& opt, const std::string& line) {
  if (!opt.quiet) std::cout << line << std::endl;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& opt) {
  const fs::path out = require_out(opt);
  if (opt.count < 1) fail(cli::kExitUsage, "--count must be >= 1");
  if (opt.extent < 8) fail(cli::kExitUsage, "--extent must be >= 8");
  const std::uint64_t seed = opt.seed.value_or(0);
  data::PhantomConfig pc;
  pc.extent = {opt.extent, opt.extent, opt.extent};
  const auto samples = data::gen_phantoms(opt.count, seed, pc);
  const auto manifest = data::save_dataset(out.string(), samples);
  const nlohmann::json cfg = {{"count", opt.count}, {"extent", opt.extent}};
  write_json(out / "provenance.json", provenance(opt, cfg, seed));
  say(opt, "wrote " + std::to_string(samples.size()) + " phantoms, manifest " + manifest);
  return cli::kExitOk;
}

int cmd_train(const Options& opt) {
  TrainConfig cfg = load_config(opt);
  const auto samples = load_data(opt, cfg.model.classes);
  const fs::path out = require_out(opt);
  cfg.model.patch = samples.front().extent;
  cfg.model.in_channels = samples.front().image.dim(0);
  try {
    cfg.model.validate();
  } catch (const Error& e) {
    fail(cli::kExitData, std::string("training data does not fit the model: ") + e.what());
  }
  const nlohmann::json prov = provenance(opt, cfg.to_json(), cfg.seed);
  write_json(out / "config.json", prov);

  std::ofstream log(out / "log.csv");
  log << csv_header(prov) << "epoch,lr,loss,dice_loss,ce_loss,grad_norm,train_dsc,seconds\n";
  const auto on_epoch = [&](const EpochLog& e) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.3f\n", e.epoch, e.lr, e.loss,
                  e.dice_part, e.ce_part, e.grad_norm, e.train_dsc, e.seconds);
    log << buf << std::flush;
    std::snprintf(buf, sizeof buf, "epoch %d  loss %.5f  lr %.5f%s", e.epoch, e.loss, e.lr,
                  e.train_dsc >= 0 ? ("  train dsc " + std::to_string(e.train_dsc)).c_str() : "");
    say(opt, buf);
  };
  const auto on_failure = [&](const Model& m, std::uint64_t step) {
    Checkpoint ck = make_checkpoint(m);
    ck.step = step;
    ck.meta = prov;
    ck.meta["failed_at_step"] = step;
    save_checkpoint((out / "failure.ckpt").string(), ck);
  };

  TrainResult r;
  try {
    r = train(cfg, samples, on_epoch, on_failure);
  } catch (const NumericError& e) {
    write_json(out / "failure.json", {{"error", e.what()}, {"provenance", prov}});
    fail(cli::kExitNumeric, std::string(e.what()) + "; snapshot in " + (out / "failure.ckpt").string());
  }

  const auto save = [&](const Model& m, const std::string& name, int epoch) {
    Checkpoint ck = make_checkpoint(m);
    ck.optimizer = r.optimizer_state;
    ck.rng = Philox(cfg.seed).state();
    ck.step = r.steps;
    ck.meta = prov;
    ck.meta["epoch"] = epoch;
    save_checkpoint((out / name).string(), ck);
  };
  save(r.model, "final.ckpt", cfg.epochs - 1);
  save(r.best, "best.ckpt", r.best_epoch);

  nlohmann::json summary = {{"provenance", prov}, {"steps", r.steps}, {"best_epoch", r.best_epoch}};
  if (!r.epochs.empty()) {
    summary["final_loss"] = r.epochs.back().loss;
    summary["final_train_dsc"] = r.epochs.back().train_dsc;
  }
  if (!r.lambda_trace.empty()) {
    write_text(out / "lambda_trace.csv", csv_header(prov) + eval::lambda_trace_csv(r.lambda_trace));
    const auto lr = eval::lambda_report(r.lambda_trace);
    summary["lambda"] = {{"final", lr.final_values},
                         {"stabilization_step", lr.stabilization_step},
                         {"overall_stabilization", lr.overall_stabilization},
                         {"tail_max_change", lr.tail_max_change},
                         {"threshold", eval::kStabilizationThreshold}};
  }
  write_json(out / "summary.json", summary);
  say(opt, "checkpoints in " + out.string());
  return cli::kExitOk;
}

int cmd_eval(const Options& opt) {
  Loaded l = load_model(opt);
  const auto samples = load_data(opt, l.model.config.classes);
  check_compatible(l.model, samples);
  const fs::path out = require_out(opt);
  const auto prov = provenance(opt, l.ckpt.meta.value("config", l.model.config.to_json()),
                               checkpoint_seed(opt, l.ckpt));
  const auto report = evaluate(l.model, samples);
  write_text(out / "metrics.csv", csv_header(prov) + report.csv());
  write_json(out / "metrics.json", {{"provenance", prov},
                                    {"checkpoint", opt.checkpoint},
                                    {"manifest", opt.manifest},
                                    {"samples", samples.size()},
                                    {"summary", report.summary()}});
  say(opt, "mean DSC " + std::to_string(report.mean_dsc()) + " over " +
               std::to_string(samples.size()) + " samples");
  return cli::kExitOk;
}

int cmd_perturb(const Options& opt) {
  std::vector<data::NoiseFamily> families;
  try {
    for (const auto& f : opt.families) families.push_back(data::parse_family(f));
  } catch (const ValueError& e) {
    fail(cli::kExitUsage, e.what());
  }
  if (families.empty()) families.assign(data::kNoiseFamilies.begin(), data::kNoiseFamilies.end());
  Loaded l = load_model(opt);
  const auto samples = load_data(opt, l.model.config.classes);
  check_compatible(l.model, samples);
  const fs::path out = require_out(opt);
  const std::uint64_t seed = checkpoint_seed(opt, l.ckpt);
  const auto prov = provenance(opt, l.ckpt.meta.value("config", l.model.config.to_json()), seed);
  const auto table = study::perturbation_grid(l.model, samples, seed, families);
  write_text(out / "perturbation.csv", csv_header(prov) + table.csv());
  write_json(out / "perturbation.json", {{"provenance", prov}, {"table", table.to_json()}});
  say(opt, "clean DSC " + std::to_string(table.clean_dsc));
  for (const auto& c : table.cells) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s level %d  param %-6g dsc %.4f  |noise| %.4g",
                  data::family_name(c.family).c_str(), c.level, c.parameter, c.dsc, c.magnitude);
    say(opt, buf);
  }
  return cli::kExitOk;
}

int cmd_analyze(const Options& opt) {
  Loaded l = load_model(opt);
  const auto samples = load_data(opt, l.model.config.classes);
  check_compatible(l.model, samples);
  const fs::path out = require_out(opt);
  const std::uint64_t seed = checkpoint_seed(opt, l.ckpt);
  const auto prov = provenance(opt, l.ckpt.meta.value("config", l.model.config.to_json()), seed);
  NamedTensors dump;
  const auto a = study::analyze_latents(l.model, samples, seed, study::kMinClusters,
                                        study::kMaxClusters, &dump);
  save_tensors((out / "latents.dumt").string(), dump, prov);
  nlohmann::json j = {{"provenance", prov}, {"analysis", a.to_json()}};
  if (!a.m2) j["note"] = "checkpoint has no noise reduction module; only m1 is analysed";
  write_json(out / "latent.json", j);
  say(opt, "m1 best k " + std::to_string(a.m1.best_k) + " (mean silhouette " +
               std::to_string(a.m1.mean_s) + ")");
  if (a.m2) {
    say(opt, "m2 best k " + std::to_string(a.m2->best_k) + " (mean silhouette " +
                 std::to_string(a.m2->mean_s) + ")");
  }
  if (a.mean_pearson) say(opt, "mean Pearson(m1, m2) " + std::to_string(*a.mean_pearson));
  return cli::kExitOk;
}

int cmd_selfcheck(const Options& opt) {
  const std::uint64_t seed = opt.seed.value_or(0);
  testing::set_corrupt_adjoint(opt.corrupt_adjoint);
  std::vector<study::Check> checks;
  try {
    checks = study::selfcheck(seed, [&](const std::string& s) { say(opt, "running " + s); });
  } catch (...) {
    testing::set_corrupt_adjoint(false);
    throw;
  }
  testing::set_corrupt_adjoint(false);
  int failed = 0;
  for (const auto& c : checks) {
    failed += !c.passed;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s %-44s measured %.3e  tol %.1e  %s", c.passed ? "ok  " : "FAIL",
                  c.name.c_str(), c.measured, c.tolerance, c.detail.c_str());
    if (!c.passed || !opt.quiet) std::cout << buf << '\n';
  }
  std::cout << checks.size() - failed << "/" << checks.size() << " checks passed (" << precision_name()
            << ")" << std::endl;
  if (!opt.out.empty()) {
    const fs::path out = require_out(opt);
    const nlohmann::json cfg = {{"corrupt_adjoint", opt.corrupt_adjoint}};
    write_json(out / "selfcheck.json", {{"provenance", provenance(opt, cfg, seed)},
                                        {"checks", study::to_json(checks)},
                                        {"failed", failed}});
  }
  return failed == 0 ? cli::kExitOk : cli::kExitSelfcheck;
}

int dispatch(const Options& opt) {
  if (opt.command == "gen-data") return cmd_gen_data(opt);
  if (opt.command == "train") return cmd_train(opt);
  if (opt.command == "eval") return cmd_eval(opt);
  if (opt.command == "perturb") return cmd_perturb(opt);
  if (opt.command == "analyze") return cmd_analyze(opt);
  if (opt.command == "selfcheck") return cmd_selfcheck(opt);
  fail(cli::kExitUsage, "unknown command '" + opt.command + "'");
}

int run_guarded(const Options& opt) {
  try {
    return dispatch(opt);
  } catch (const Failure& f) {
    std::cerr << "dumamba " << opt.command << ": " << f.message << std::endl;
    return f.code;
  } catch (const NumericError& e) {
    std::cerr << "dumamba " << opt.command << ": numeric failure: " << e.what() << std::endl;
    return cli::kExitNumeric;
  } catch (const ValueError& e) {
    std::cerr << "dumamba " << opt.command << ": " << e.what() << std::endl;
    return cli::kExitUsage;
  } catch (const Error& e) {
    std::cerr << "dumamba " << opt.command << ": " << e.what() << std::endl;
    return cli::kExitData;
  }
}

}  // namespace

DUMAMBA_END_NAMESPACE

namespace dumamba::cli {

#if defined(DUMAMBA_SCALAR_F64)
int run_f64(const Options& opt) { return dumamba::f64::run_guarded(opt); }
#else
int run_f32(const Options& opt) { return dumamba::f32::run_guarded(opt); }
#endif

}  // namespace dumamba::cli
