#include "dumamba/study.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dumamba/probe.hpp"
#include "dumamba/ssm.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace study {

namespace {

Check make_check(std::string name, double tolerance, double measured, std::string detail = {}) {
  Check c{std::move(name), tolerance, measured, false, std::move(detail)};
  c.passed = std::isfinite(measured) && (tolerance == 0.0 ? measured == 0.0 : measured <= tolerance);
  return c;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

nlohmann::json to_json(const std::vector<Check>& checks) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : checks) {
    out.push_back({{"name", c.name},
                   {"tolerance", c.tolerance},
                   {"measured", c.measured},
                   {"passed", c.passed},
                   {"detail", c.detail}});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Check> gradient_suite(std::uint64_t seed, int seeds_per_case) {
  std::vector<Check> out;
  for (const auto& name : check::grad_case_names()) {
    for (int s = 0; s < seeds_per_case; ++s) {
      const std::uint64_t case_seed = seed * 1000 + static_cast<std::uint64_t>(s) + 1;
#if defined(DUMAMBA_SCALAR_F64)
      auto subject = check::open_grad_case_f64(name, case_seed);
#else
      auto subject = check::open_grad_case_f32(name, case_seed);
#endif
      const auto r = check::check_against_oracle(*subject, case_seed);
      out.push_back(make_check("grad/" + name + "/" + std::to_string(case_seed), gradient_tolerance(),
                               r.rel_err,
                               std::to_string(r.coordinates) + " coordinates, |g| " +
                                   fmt("%.3g", r.norm)));
    }
  }
  return out;
}

Check scan_kernel_agreement(std::uint64_t seed, int seeds, std::size_t max_length) {
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    Philox rng = Philox(seed).fork(static_cast<std::uint64_t>(s));
    const auto n = static_cast<std::size_t>(1 + rng.below(8));
    const auto length = static_cast<std::size_t>(1 + rng.below(max_length));
    std::vector<Scalar> a_log(n), b(n), c(n), x(length);
    for (auto& v : a_log) v = static_cast<Scalar>(rng.uniform(-2.0, 1.5));
    for (auto& v : b) v = static_cast<Scalar>(rng.normal());
    for (auto& v : c) v = static_cast<Scalar>(rng.normal());
    for (auto& v : x) v = static_cast<Scalar>(rng.normal());
    const auto delta = static_cast<Scalar>(std::exp(rng.uniform(std::log(1e-3), std::log(1.0))));

    const std::vector<double> a_log_d(a_log.begin(), a_log.end()), x_d(x.begin(), x.end());
    const auto params = ssm::SsmParams::lti_from_log(a_log_d, {b.begin(), b.end()},
                                                     {c.begin(), c.end()}, delta);
    const auto conv = ssm::causal_convolve(ssm::ssm_kernel(params, length), x_d);
    const auto scan = ssm::ssm_scan(params, x_d);

    // The tensor op in this precision, with the same LTI system on one lane.
    const auto L = static_cast<Index>(length), N = static_cast<Index>(n);
    std::vector<Scalar> bs, cs;
    for (std::size_t t = 0; t < length; ++t) {
      bs.insert(bs.end(), b.begin(), b.end());
      cs.insert(cs.end(), c.begin(), c.end());
    }
    const Tensor y = ssm::selective_scan(Tensor::from({1, L, 1}, x), Tensor::full({1, L, 1}, delta),
                                         Tensor::from({1, N}, a_log), Tensor::from({1, L, N}, bs),
                                         Tensor::from({1, L, N}, cs), Tensor::zeros({1}));
    const auto yd = y.data();
    for (std::size_t t = 0; t < length; ++t) {
      worst = std::max({worst, std::abs(scan[t] - conv[t]), std::abs(static_cast<double>(yd[t]) - conv[t])});
    }
  }
  return make_check("ssm/scan_vs_kernel", 1e-5, worst,
                    std::to_string(seeds) + " systems, L <= " + std::to_string(max_length));
}

Check scan_worked_case() {
  ssm::SsmParams p;
  p.a = {0.0};
  p.b = {{1.0}};
  p.c = {{1.0}};
  p.delta = {1.0};
  const std::vector<double> x{1.0, 1.0, 1.0}, want{1.0, 2.0, 3.0};
  const auto scan = ssm::ssm_scan(p, x);
  const auto conv = ssm::causal_convolve(ssm::ssm_kernel(p, 3), x);
  double err = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    err = std::max({err, std::abs(scan[t] - want[t]), std::abs(conv[t] - want[t])});
  }
  return make_check("ssm/worked_case", 0.0, err, "a=0 b=c=1 delta=1 x=[1,1,1]");
}

Check nrm_off_equivalence(const ModelConfig& cfg, std::uint64_t seed, int inputs) {
  ModelConfig c = cfg;
  c.nrm_enabled = true;
  c.seed = seed;
  Model model = build_model(c);
  for (auto& v : model.nrm->lambda.values.mutable_data()) v = 0;
  model.nrm->m2.zero_biases();
  const Model baseline = model.without_nrm();

  double worst = 0.0;
  Philox rng = Philox(seed).fork(0x6e726d);
  for (int i = 0; i < inputs; ++i) {
    const Shape shape{1, c.in_channels, c.patch[0], c.patch[1], c.patch[2]};
    Tensor x = Tensor::zeros(shape);
    for (auto& v : x.mutable_data()) v = static_cast<Scalar>(rng.normal());
    const auto a = forward(model, x).to_vector();
    const auto b = forward(baseline, x).to_vector();
    for (std::size_t j = 0; j < a.size(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(a[j]) - b[j]));
    }
  }
  return make_check("nrm/off_equivalence", 1e-6, worst, std::to_string(inputs) + " inputs");
}

// ---------------------------------------------------------------------------
// Metric oracles.

namespace {

struct Brute {
  double dsc = 0.0, iou = 0.0;
  std::optional<double> hd95;
};

bool is_surface(eval::Mask m, const eval::Extent& e, std::int64_t z, std::int64_t y, std::int64_t x) {
  const auto at = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) {
    if (zz < 0 || yy < 0 || xx < 0 || zz >= e[0] || yy >= e[1] || xx >= e[2]) return false;
    return m[static_cast<std::size_t>((zz * e[1] + yy) * e[2] + xx)] != 0;
  };
  if (!at(z, y, x)) return false;
  return !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
         !at(z, y, x - 1) || !at(z, y, x + 1);
}

Brute brute_force(eval::Mask p, eval::Mask g, const eval::Extent& e, const eval::Spacing& sp) {
  Brute r;
  double inter = 0, sp_ = 0, sg = 0, uni = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] != 0, b = g[i] != 0;
    inter += a && b;
    uni += a || b;
    sp_ += a;
    sg += b;
  }
  r.dsc = sp_ + sg == 0 ? 1.0 : 2.0 * inter / (sp_ + sg);
  r.iou = uni == 0 ? 1.0 : inter / uni;
  if (sp_ == 0 || sg == 0) return r;

  using P = std::array<double, 3>;
  std::vector<P> ps, gs;
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) {
        const P pt{z * sp[0], y * sp[1], x * sp[2]};
        if (is_surface(p, e, z, y, x)) ps.push_back(pt);
        if (is_surface(g, e, z, y, x)) gs.push_back(pt);
      }
  std::vector<double> d;
  const auto nearest = [](const P& q, const std::vector<P>& set) {
    double best = INFINITY;
    for (const auto& s : set) {
      best = std::min(best, std::hypot(q[0] - s[0], q[1] - s[1], q[2] - s[2]));
    }
    return best;
  };
  for (const auto& q : ps) d.push_back(nearest(q, gs));
  for (const auto& q : gs) d.push_back(nearest(q, ps));
  std::sort(d.begin(), d.end());
  const double rank = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, d.size() - 1);
  r.hd95 = d[lo] + (rank - static_cast<double>(lo)) * (d[hi] - d[lo]);
  return r;
}

struct OracleTally {
  double overlap_err = 0.0;
  double hd_err = 0.0;
  double identity_err = 0.0;
  std::size_t pairs = 0;
  std::size_t undefined_mismatch = 0;

  void add(eval::Mask p, eval::Mask g, const eval::Extent& e, const eval::Spacing& sp) {
    const Brute want = brute_force(p, g, e, sp);
    const auto got = eval::dsc_iou(p, g);
    overlap_err = std::max({overlap_err, std::abs(got.dsc - want.dsc), std::abs(got.iou - want.iou)});
    identity_err = std::max(identity_err, std::abs(got.iou - got.dsc / (2.0 - got.dsc)));
    const auto hd = eval::hd95(p, g, e, sp);
    if (hd.has_value() != want.hd95.has_value()) {
      ++undefined_mismatch;
    } else if (hd) {
      hd_err = std::max(hd_err, std::abs(*hd - *want.hd95));
    }
    ++pairs;
  }
};

}  // namespace

std::vector<Check> metric_oracles(std::uint64_t seed, int random_pairs) {
  OracleTally t;
  // Every pair of masks on a 2x2x2 grid.
  const eval::Extent small{2, 2, 2};
  const eval::Spacing unit{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> p(8), g(8);
  for (int a = 0; a < 256; ++a) {
    for (int i = 0; i < 8; ++i) p[i] = (a >> i) & 1;
    for (int b = 0; b < 256; ++b) {
      for (int i = 0; i < 8; ++i) g[i] = (b >> i) & 1;
      t.add(p, g, small, unit);
    }
  }
  // Random pairs on random extents and anisotropic spacings.
  Philox rng = Philox(seed).fork(0x6d6574);
  for (int r = 0; r < random_pairs; ++r) {
    const eval::Extent e{static_cast<std::int64_t>(1 + rng.below(8)),
                         static_cast<std::int64_t>(1 + rng.below(8)),
                         static_cast<std::int64_t>(1 + rng.below(8))};
    const eval::Spacing sp = r % 2 == 0 ? unit
                                        : eval::Spacing{rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0),
                                                        rng.uniform(0.5, 3.0)};
    const auto n = static_cast<std::size_t>(e[0] * e[1] * e[2]);
    const double dp = rng.uniform(), dg = rng.uniform();
    std::vector<std::uint8_t> pm(n), gm(n);
    for (std::size_t i = 0; i < n; ++i) {
      pm[i] = rng.uniform() < dp;
      gm[i] = rng.uniform() < dg;
    }
    t.add(pm, gm, e, sp);
  }
  const std::string pairs = std::to_string(t.pairs) + " mask pairs";
  return {make_check("metrics/dsc_iou_exact", 0.0, t.overlap_err, pairs),
          make_check("metrics/hd95_brute_force", 1e-6, t.hd_err, pairs),
          make_check("metrics/hd95_defined_same", 0.0, static_cast<double>(t.undefined_mismatch), pairs),
          make_check("metrics/dsc_iou_identity", 1e-12, t.identity_err, "IoU = DSC / (2 - DSC)")};
}

std::vector<Check> selfcheck(std::uint64_t seed, const Progress& progress) {
  std::vector<Check> out;
  const auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  note("gradient suite");
  auto grads = gradient_suite(seed);
  out.insert(out.end(), grads.begin(), grads.end());
  note("state space oracles");
  out.push_back(scan_worked_case());
  out.push_back(scan_kernel_agreement(seed));
  note("noise reduction module off");
  out.push_back(nrm_off_equivalence(ModelConfig::tiny(), seed));
  note("metric oracles");
  auto metrics = metric_oracles(seed);
  out.insert(out.end(), metrics.begin(), metrics.end());
  return out;
}

// ---------------------------------------------------------------------------
// Feature noise.

const PerturbCell& PerturbTable::at(data::NoiseFamily family, int level) const {
  for (const auto& c : cells) {
    if (c.family == family && c.level == level) return c;
  }
  throw ValueError("no cell for " + data::family_name(family) + " level " + std::to_string(level));
}

nlohmann::json PerturbTable::to_json() const {
  nlohmann::json fams = nlohmann::json::object();
  for (const auto& c : cells) {
    fams[data::family_name(c.family)].push_back(
        {{"level", c.level}, {"parameter", c.parameter}, {"dsc", c.dsc}, {"magnitude", c.magnitude}});
  }
  return {{"clean_dsc", clean_dsc}, {"families", fams}};
}

std::string PerturbTable::csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "family,level,parameter,dsc,magnitude\n";
  for (const auto& c : cells) {
    os << data::family_name(c.family) << ',' << c.level << ',' << c.parameter << ',' << c.dsc << ','
       << c.magnitude << '\n';
  }
  return os.str();
}

PerturbTable perturbation_grid(const Model& model, const std::vector<data::VolumeSample>& samples,
                               std::uint64_t seed, const std::vector<data::NoiseFamily>& families) {
  if (samples.empty()) throw ValueError("perturbation needs at least one sample");
  PerturbTable table;
  table.clean_dsc = evaluate(model, samples).mean_dsc();

  for (auto family : families) {
    for (int level = 1; level <= data::kNoiseLevels; ++level) {
      PerturbCell cell;
      cell.family = family;
      cell.level = level;
      eval::MetricsReport report;
      double magnitude = 0.0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        data::NoiseSpec spec;
        spec.family = family;
        spec.level = level;
        spec.seed = Philox(seed).fork(i).next_u64();
        spec.validate();
        cell.parameter = spec.parameter();
        ForwardHooks hooks;
        hooks.after_first_block = [&](const Tensor& f) {
          Tensor noisy = data::inject_noise(f, spec);
          const auto a = f.data(), b = noisy.data();
          double sum = 0.0;
          for (std::size_t j = 0; j < a.size(); ++j) sum += std::abs(static_cast<double>(b[j]) - a[j]);
          magnitude += sum / static_cast<double>(a.size());
          return noisy;
        };
        const auto pred = predict(model, samples[i], &hooks);
        const auto& s = samples[i];
        auto rows = eval::evaluate_sample(s.id, pred, s.label, s.extent,
                                          {s.spacing[0], s.spacing[1], s.spacing[2]},
                                          static_cast<int>(model.config.classes));
        report.rows.insert(report.rows.end(), rows.begin(), rows.end());
      }
      cell.dsc = report.mean_dsc();
      cell.magnitude = magnitude / static_cast<double>(samples.size());
      table.cells.push_back(cell);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Latent analysis.

nlohmann::json LatentAnalysis::to_json() const {
  const auto sil = [](const eval::SilhouetteResult& r) {
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& [k, s] : r.scores) scores.push_back({{"k", k}, {"mean_silhouette", s}});
    return nlohmann::json{{"best_k", r.best_k}, {"mean_silhouette", r.mean_s}, {"scores", scores},
                          {"labels", r.labels}};
  };
  nlohmann::json j = {{"samples", samples}, {"m1", sil(m1)}, {"lambdas", lambdas},
                      {"k_range", {kMinClusters, kMaxClusters}}};
  if (m2) j["m2"] = sil(*m2);
  if (mean_pearson) {
    j["mean_pearson_m1_m2"] = *mean_pearson;
    j["pearson_channels"] = pearson_channels;
  }
  return j;
}

LatentAnalysis analyze_latents(const Model& model, const std::vector<data::VolumeSample>& samples,
                               std::uint64_t seed, int k_lo, int k_hi, NamedTensors* dump) {
  if (samples.empty()) throw ValueError("latent analysis needs at least one sample");
  LatentAnalysis out;
  out.samples = samples.size();
  const std::size_t channels = static_cast<std::size_t>(model.config.channels.back());
  eval::Points m1(channels), m2(channels);
  for (const auto& s : samples) {
    ForwardTrace trace;
    predict(model, s, nullptr, &trace);
    const auto append = [&](eval::Points& pts, const Tensor& t) {
      const auto d = t.data();
      const std::size_t per = d.size() / channels;
      for (std::size_t c = 0; c < channels; ++c) {
        pts[c].insert(pts[c].end(), d.begin() + c * per, d.begin() + (c + 1) * per);
      }
    };
    append(m1, trace.m1);
    if (dump) dump->emplace_back(s.id + ".m1", trace.m1);
    if (trace.nrm) {
      append(m2, trace.nrm->m2);
      if (dump) {
        dump->emplace_back(s.id + ".m2", trace.nrm->m2);
        dump->emplace_back(s.id + ".e_hat", trace.nrm->e_hat);
        dump->emplace_back(s.id + ".m_hat", trace.nrm->m_hat);
      }
    }
  }
  out.m1 = eval::kmeans_silhouette(m1, k_lo, k_hi, seed);
  if (model.nrm) {
    out.m2 = eval::kmeans_silhouette(m2, k_lo, k_hi, seed);
    double sum = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      if (const auto r = eval::pearson(m1[c], m2[c])) {
        sum += *r;
        ++out.pearson_channels;
      }
    }
    if (out.pearson_channels > 0) out.mean_pearson = sum / static_cast<double>(out.pearson_channels);
    const auto l = model.nrm->lambda.values.data();
    out.lambdas.assign(l.begin(), l.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Paired comparison.

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : runs) {
    rs.push_back({{"seed", r.seed},
                  {"variant", r.nrm ? "diff_umamba" : "umamba_bot"},
                  {"train_dsc", r.train_dsc},
                  {"test_dsc", r.test_dsc},
                  {"final_loss", r.final_loss},
                  {"seconds", r.seconds}});
  }
  const auto st = [](const eval::Stats& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
  };
  return {{"train_samples", train_samples}, {"test_samples", test_samples}, {"runs", rs},
          {"diff_umamba", st(with_nrm)},     {"umamba_bot", st(baseline)},  {"paired_gaps", gaps},
          {"mean_gap", mean_gap},            {"wins", wins},                {"margin", margin},
          {"gate_passed", gate_passed}};
}

std::string ComparisonReport::text() const {
  std::ostringstream os;
  char buf[160];
  os << "seed   diff_umamba  umamba_bot   gap\n";
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2) {
    std::snprintf(buf, sizeof buf, "%-6llu %-12.4f %-12.4f %+.4f\n",
                  static_cast<unsigned long long>(runs[i].seed), runs[i].test_dsc, runs[i + 1].test_dsc,
                  gaps[i / 2]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "mean   %.4f+-%.4f %.4f+-%.4f %+.4f  (wins %d/%zu, gate %s at margin %.2f)\n",
                with_nrm.mean, with_nrm.std, baseline.mean, baseline.std, mean_gap, wins, gaps.size(),
                gate_passed ? "passed" : "failed", margin);
  os << buf;
  return os.str();
}

ComparisonReport compare_variants(const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                  std::size_t train_samples, std::size_t test_samples,
                                  std::uint64_t data_seed, const Progress& progress) {
  if (seeds.empty()) throw ValueError("comparison needs at least one seed");
  data::PhantomConfig pc;
  pc.extent = cfg.model.patch;
  auto all = data::gen_phantoms(train_samples + test_samples, data_seed, pc);
  const std::vector<data::VolumeSample> train_set(all.begin(), all.begin() + static_cast<long>(train_samples));
  const std::vector<data::VolumeSample> test_set(all.begin() + static_cast<long>(train_samples), all.end());

  ComparisonReport rep;
  rep.train_samples = train_samples;
  rep.test_samples = test_samples;
  std::vector<double> a, b;
  for (auto seed : seeds) {
    for (bool nrm : {true, false}) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainConfig c = cfg;
      c.seed = seed;
      c.model.seed = seed;
      c.model.nrm_enabled = nrm;
      c.eval_every = std::max(c.epochs, 1);
      auto result = train(c, train_set);
      ComparisonRun run;
      run.seed = seed;
      run.nrm = nrm;
      run.train_dsc = result.epochs.empty() ? 0.0 : result.epochs.back().train_dsc;
      run.final_loss = result.epochs.empty() ? 0.0 : result.epochs.back().loss;
      run.test_dsc = evaluate(result.model, test_set).mean_dsc();
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      (nrm ? a : b).push_back(run.test_dsc);
      rep.runs.push_back(run);
      if (progress) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "seed %llu %s: test DSC %.4f (%.0f s)",
                      static_cast<unsigned long long>(seed), nrm ? "diff_umamba" : "umamba_bot",
                      run.test_dsc, run.seconds);
        progress(buf);
      }
    }
    rep.gaps.push_back(a.back() - b.back());
    rep.wins += a.back() > b.back();
  }
  rep.with_nrm = eval::stats(a);
  rep.baseline = eval::stats(b);
  rep.mean_gap = rep.with_nrm.mean - rep.baseline.mean;
  rep.gate_passed = rep.with_nrm.mean >= rep.baseline.mean - rep.margin;
  return rep;
}

}  // namespace study

DUMAMBA_END_NAMESPACE
