#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lstsd/config.hpp"
#include "lstsd/gradcheck.hpp"

int main(int argc, char** argv) {
  CLI::App app{"training-policy laboratory: long/short-term sample distillation and baselines"};
  app.require_subcommand(1);

  std::string config_path, out_root;
  std::uint64_t seed_override = 0;
  int jobs = 1;
  auto* run_cmd = app.add_subcommand("run", "run every cell of an experiment config");
  run_cmd->add_option("config", config_path, "experiment config file")->required();
  run_cmd->add_option("--out", out_root,
                      "output root (default: out.dir, then $LSTSD_OUT_ROOT, then ./runs)");
  auto* seed_opt = run_cmd->add_option("--seed-override", seed_override,
                                       "replace the config's seed list with one seed");
  run_cmd->add_option("--jobs", jobs, "training cells to run in parallel")
      ->check(CLI::PositiveNumber);

  std::vector<std::string> dirs;
  std::string reference;
  auto* cmp_cmd = app.add_subcommand("compare", "compare finished run directories");
  cmp_cmd->add_option("dirs", dirs, "run directories holding manifest.txt")->required();
  cmp_cmd->add_option("--reference", reference, "group the delta column is measured against");

  std::uint64_t gc_seed = 7;
  auto* gc_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc_cmd->add_option("--seed", gc_seed, "base seed for the probe tensors");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      const lstsd::ExperimentConfig cfg = lstsd::load_config_file(config_path);
      lstsd::RunOptions opts;
      opts.out_root = out_root;
      if (seed_opt->count() > 0) opts.seed_override = seed_override;
      opts.jobs = jobs;
      const lstsd::ExperimentResult res = lstsd::run_experiment(cfg, opts);
      std::printf("run dir: %s\n", res.run_dir.c_str());
      for (const auto& o : res.cells) {
        if (o.ok)
          std::printf("  %-32s ok      final %.4f  best %.4f  (%.1fs)\n",
                      o.cell.prefix.c_str(), o.report.final_test_acc,
                      o.report.best_test_acc, o.report.wall_seconds);
        else
          std::printf("  %-32s FAILED  %s\n", o.cell.prefix.c_str(), o.error.c_str());
      }
      if (!res.comparison.empty()) std::printf("\n%s", res.comparison.c_str());
      return res.ok ? 0 : 1;
    }
    if (cmp_cmd->parsed()) {
      std::printf("%s", lstsd::compare_run_dirs(dirs, reference).format().c_str());
      return 0;
    }
    const lstsd::GradCheckReport report = lstsd::run_gradient_checks(gc_seed);
    std::printf("%s", report.format().c_str());
    return report.all_pass() ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
