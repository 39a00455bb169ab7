#include <iostream>

#include "CLI11.hpp"

#include "dumamba/cli.hpp"

int main(int argc, char** argv) {
  using dumamba::cli::Options;
  Options opt;
  CLI::App app{"Diff-UMamba segmentation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::uint64_t seed = 0;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON experiment config");
    sub->add_option("--seed", seed, "random seed (recorded in every output)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_flag("--f64", opt.f64, "run in double precision");
    sub->add_flag("-q,--quiet", opt.quiet, "only print failures and results");
  };
  int epochs = 0;
  double lr = 0;

  auto* gen = app.add_subcommand("gen-data", "write synthetic phantom volumes and a manifest");
  common(gen);
  gen->add_option("--count", opt.count, "number of phantoms")->capture_default_str();
  gen->add_option("--extent", opt.extent, "cubic volume size")->capture_default_str();

  auto* trn = app.add_subcommand("train", "train a model on a manifest");
  common(trn);
  trn->add_option("--manifest", opt.manifest, "training manifest")->required();
  auto* epochs_opt = trn->add_option("--epochs", epochs, "override epochs");
  auto* lr_opt = trn->add_option("--lr", lr, "override the initial learning rate");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  common(ev);
  ev->add_option("--checkpoint", opt.checkpoint, "checkpoint file")->required();
  ev->add_option("--manifest", opt.manifest, "evaluation manifest")->required();

  auto* pert = app.add_subcommand("perturb", "DSC under feature noise at the first residual block");
  common(pert);
  pert->add_option("--checkpoint", opt.checkpoint, "checkpoint file")->required();
  pert->add_option("--manifest", opt.manifest, "evaluation manifest")->required();
  pert->add_option("--families", opt.families, "gaussian, speckle, periodic, salt_pepper")
      ->delimiter(',');

  auto* an = app.add_subcommand("analyze", "cluster and correlate bottleneck channels");
  common(an);
  an->add_option("--checkpoint", opt.checkpoint, "checkpoint file")->required();
  an->add_option("--manifest", opt.manifest, "manifest")->required();

  auto* sc = app.add_subcommand("selfcheck", "run the built-in numerical checks");
  common(sc);
  sc->add_flag("--corrupt-adjoint", opt.corrupt_adjoint, "inject a wrong multiply adjoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dumamba::cli::kExitOk : dumamba::cli::kExitUsage;
  }

  for (auto* sub : app.get_subcommands()) {
    opt.command = sub->get_name();
    if (sub->count("--seed") > 0) opt.seed = seed;
  }
  if (epochs_opt->count() > 0) opt.epochs = epochs;
  if (lr_opt->count() > 0) opt.lr = lr;
  return dumamba::cli::run(opt);
}
