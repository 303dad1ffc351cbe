#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "lstsd/config.hpp"

using namespace lstsd;
namespace fs = std::filesystem;

namespace {

const char* kMinimal =
    "dataset.kind = spiral\n"
    "arch.kind = mlp\n"
    "policy.kind = lstsd\n"
    "seeds = 1\n";

// Small enough that a full experiment finishes in well under a second.
std::string tiny_experiment(const std::string& extra = "") {
  return
      "dataset.kind = spiral\n"
      "dataset.seed = 9\n"
      "dataset.spiral.train_per_class = 10\n"
      "dataset.spiral.test_per_class = 5\n"
      "dataset.spiral.classes = 3\n"
      "dataset.spiral.noise_std = 0.2\n"
      "arch.kind = mlp\n"
      "arch.hidden = 8\n"
      "policy.kind = lstsd,vanilla\n"
      "policy.mini_gen_epochs = 1\n"
      "policy.mini_generations = 2\n"
      "optim.batch_size = 16\n"
      "seeds = 1,2\n" +
      extra;
}

RunReport fake_report(double final_acc, double best_acc) {
  RunReport r;
  r.final_test_acc = final_acc;
  r.best_test_acc = best_acc;
  return r;
}

struct TempRoot {
  fs::path path;
  explicit TempRoot(const char* name) : path(name) { fs::remove_all(path); }
  ~TempRoot() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("minimal config parses with library defaults") {
  const ExperimentConfig cfg = parse_config(kMinimal);
  CHECK(cfg.text == kMinimal);
  CHECK(cfg.dataset_kind == "spiral");
  CHECK(cfg.dataset_seed == 42);
  CHECK(cfg.spiral_train_per_class == 1000);
  CHECK(cfg.spiral_test_per_class == 334);
  CHECK(cfg.spiral_classes == 3);
  CHECK(cfg.spiral_noise_std == 0.15);
  CHECK(cfg.hidden == std::vector<int>{64, 64});
  CHECK(cfg.policy_kinds == std::vector<PolicyKind>{PolicyKind::lstsd});
  CHECK(cfg.policy.lambda_long == 2.4);
  CHECK(cfg.policy.lambda_short == 4.0);
  CHECK(cfg.policy.temperature == 2.0);
  CHECK(cfg.policy.mini_gen_epochs == 6);
  CHECK(cfg.policy.mini_generations == 4);
  CHECK(cfg.optim.batch_size == 32);
  CHECK(cfg.optim.momentum == 0.9);
  CHECK(cfg.optim.weight_decay == 1e-4);
  CHECK(cfg.schedule.kind == LrSchedule::Kind::step_decay);
  CHECK(cfg.schedule.base_lr == 0.1);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1});
  CHECK(cfg.compare_reference == "vanilla");
  CHECK_FALSE(cfg.dump_dataset);
  CHECK_FALSE(cfg.cycle_epochs_set);
}

TEST_CASE("comments and spacing are tolerated") {
  const ExperimentConfig cfg = parse_config(
      "# spiral sanity run\n"
      "\n"
      "  dataset.kind   =   spiral\n"
      "arch.kind = mlp\n"
      "policy.kind = vanilla , lstsd\n"
      "seeds = 3 , 4\n");
  CHECK(cfg.policy_kinds == std::vector<PolicyKind>{PolicyKind::vanilla, PolicyKind::lstsd});
  CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 4});
}

TEST_CASE("malformed configs name the offending line") {
  CHECK_THROWS_WITH_AS(parse_config("dataset.kind = spiral\ndataset.seed = 1\n"
                                    "arch.kind = mlp\ndataset.seed = 2\n"
                                    "policy.kind = lstsd\nseeds = 1\n"),
                       doctest::Contains("duplicate key 'dataset.seed' (lines 2 and 4)"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "dataset.sed = 1\n"),
                       doctest::Contains("unknown config key 'dataset.sed' (line 5)"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("dataset.kind = spiral\npolicy.kind = lstsd\nseeds = 1\n"),
                       doctest::Contains("missing required key 'arch.kind'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "out.dir =\n"),
                       doctest::Contains("empty value for key 'out.dir' (line 5)"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "just some words\n"),
                       doctest::Contains("line 5 is not 'key = value'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "dataset.seed = soon\n"),
                       doctest::Contains("invalid"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "out.dump_dataset = yes\n"),
                       doctest::Contains("invalid"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config("dataset.kind = spiral\narch.kind = mlp\n"
                   "policy.kind = lstsd,vanilla,lstsd\nseeds = 1\n"),
      doctest::Contains("lists 'lstsd' twice"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("dataset.kind = mnist\narch.kind = mlp\n"
                                    "policy.kind = lstsd\nseeds = 1\n"),
                       doctest::Contains("unknown dataset.kind 'mnist'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "schedule.kind = cosine\n"),
                       doctest::Contains("unknown schedule.kind"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "schedule.milestones = 0.5,0.25\n"),
                       doctest::Contains("strictly increasing"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(std::string(kMinimal) + "schedule.floor_lr = 0.2\n"),
                       doctest::Contains("floor_lr"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config(std::string(kMinimal) + "dataset.norm.mean = 0.5,0.5,0.5\n"
                                           "dataset.norm.std = 1,0,1\n"),
      doctest::Contains("nonzero"), std::invalid_argument);
}

TEST_CASE("a weight every kind would force to zero is rejected") {
  CHECK_THROWS_WITH_AS(
      parse_config("dataset.kind = spiral\narch.kind = mlp\n"
                   "policy.kind = lstsd_no_long\npolicy.lambda_long = 1.0\nseeds = 1\n"),
      doctest::Contains("every policy kind forces it to zero"), std::invalid_argument);

  // With a kind that can use the weight, the ablation cell just zeroes its own copy.
  const ExperimentConfig cfg =
      parse_config("dataset.kind = spiral\narch.kind = mlp\n"
                   "policy.kind = lstsd,lstsd_no_long\npolicy.lambda_long = 1.0\nseeds = 1\n");
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].policy.lambda_long == 1.0);
  CHECK(cells[1].policy.lambda_long == 0.0);
}

TEST_CASE("only one sweep axis may be set") {
  CHECK_THROWS_WITH_AS(
      parse_config(std::string(kMinimal) +
                   "sweep.mini_gen_epochs = 2,3\nsweep.lambda_long = 0,1\n"),
      doctest::Contains("at most one sweep axis"), std::invalid_argument);
}

TEST_CASE("the cell grid crosses kinds, sweep values and seeds") {
  const ExperimentConfig cfg =
      parse_config("dataset.kind = spiral\narch.kind = mlp\n"
                   "policy.kind = lstsd,vanilla\nseeds = 1,2\n");
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].prefix == "lstsd_s1");
  CHECK(cells[1].prefix == "lstsd_s2");
  CHECK(cells[2].prefix == "vanilla_s1");
  CHECK(cells[3].prefix == "vanilla_s2");
  CHECK(cells[0].group == "lstsd");
  CHECK(cells[3].group == "vanilla");
  CHECK(cells[1].seed == 2);
  CHECK(cells[2].policy.kind == PolicyKind::vanilla);
}

TEST_CASE("the epoch sweep repartitions a fixed budget") {
  const ExperimentConfig cfg = parse_config(
      "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = lstsd\n"
      "policy.mini_gen_epochs = 6\npolicy.mini_generations = 4\n"
      "sweep.mini_gen_epochs = 1,2,6,12\nseeds = 1\n");
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  REQUIRE(cells.size() == 4);
  const std::vector<std::string> groups = {"lstsd_E1", "lstsd_E2", "lstsd_E6", "lstsd_E12"};
  const std::vector<int> e = {1, 2, 6, 12}, m = {24, 12, 4, 2};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(cells[i].group == groups[i]);
    CHECK(cells[i].policy.mini_gen_epochs == e[i]);
    CHECK(cells[i].policy.mini_generations == m[i]);
    CHECK(cells[i].policy.total_epochs() == 24);
  }

  CHECK_THROWS_WITH_AS(
      enumerate_cells(parse_config(
          "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = lstsd\n"
          "policy.mini_gen_epochs = 6\npolicy.mini_generations = 4\n"
          "sweep.mini_gen_epochs = 5\nseeds = 1\n")),
      doctest::Contains("does not divide the fixed budget of 24"), std::invalid_argument);
}

TEST_CASE("weight sweeps label groups with the swept value") {
  const ExperimentConfig cfg = parse_config(
      "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = lstsd\n"
      "sweep.lambda_long = 0,1.2\nseeds = 1\n");
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].group == "lstsd_ll0");
  CHECK(cells[1].group == "lstsd_ll1.2");
  CHECK(cells[0].policy.lambda_long == 0.0);
  CHECK(cells[1].policy.lambda_long == 1.2);

  CHECK_THROWS_WITH_AS(
      enumerate_cells(parse_config(
          "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = lstsd_no_long\n"
          "sweep.lambda_long = 0,1.2\nseeds = 1\n")),
      doctest::Contains("cannot apply to lstsd_no_long"), std::invalid_argument);

  const ExperimentConfig base = parse_config(
      "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = mean_teacher\n"
      "sweep.lambda_baseline = 0.5,1,2\nseeds = 1\n");
  const std::vector<RunCell> bcells = enumerate_cells(base);
  REQUIRE(bcells.size() == 3);
  CHECK(bcells[0].group == "mean_teacher_lb0.5");
  CHECK(bcells[2].group == "mean_teacher_lb2");
  CHECK(bcells[1].policy.lambda_baseline == 1.0);
  CHECK(bcells[2].policy.lambda_baseline == 2.0);
}

TEST_CASE("snapshot kinds always get a cyclic schedule matched to the mini-generation") {
  const ExperimentConfig cfg = parse_config(
      "dataset.kind = spiral\narch.kind = mlp\n"
      "policy.kind = snapshot_ensembles,vanilla\n"
      "policy.mini_gen_epochs = 6\npolicy.mini_generations = 2\n"
      "sweep.mini_gen_epochs = 2,6\nseeds = 1\n");
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].schedule.kind == LrSchedule::Kind::cyclic_cosine);
  CHECK(cells[0].schedule.cycle_epochs == 2);
  CHECK(cells[1].schedule.cycle_epochs == 6);
  CHECK(cells[2].schedule.kind == LrSchedule::Kind::step_decay);  // vanilla keeps the config
  CHECK(cells[3].schedule.kind == LrSchedule::Kind::step_decay);

  // Pinning schedule.cycle_epochs wins over the per-cell default.
  const ExperimentConfig pinned = parse_config(
      "dataset.kind = spiral\narch.kind = mlp\npolicy.kind = snapshot_ensembles\n"
      "policy.mini_gen_epochs = 6\nschedule.cycle_epochs = 3\nseeds = 1\n");
  CHECK(enumerate_cells(pinned)[0].schedule.cycle_epochs == 3);
}

TEST_CASE("hash and delta formats are frozen") {
  CHECK(fnv1a64("") == 14695981039346656037ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);

  CHECK(format_delta(0.0) == "(-0.00)");
  CHECK(format_delta(-0.00004) == "(-0.00)");
  CHECK(format_delta(0.00006) == "(+0.01)");
  CHECK(format_delta(0.0102) == "(+1.02)");
  CHECK(format_delta(-0.02) == "(-2.00)");
}

TEST_CASE("comparison tables put the reference first") {
  const std::vector<std::pair<std::string, RunReport>> labeled = {
      {"lstsd", fake_report(0.8, 0.85)},
      {"vanilla", fake_report(0.5, 0.55)},
      {"lstsd", fake_report(0.6, 0.65)},
      {"vanilla", fake_report(0.7, 0.75)},
  };
  const ComparisonTable table = compare_runs(labeled, "vanilla");
  REQUIRE(table.rows.size() == 2);
  CHECK(table.reference == "vanilla");
  CHECK(table.rows[0].label == "vanilla");
  CHECK(table.rows[0].is_reference);
  CHECK(table.rows[0].runs == 2);
  CHECK(std::fabs(table.rows[0].mean_final - 0.6) < 1e-15);
  CHECK(std::fabs(table.rows[0].std_final - 0.1) < 1e-15);
  CHECK(table.rows[0].delta == 0.0);
  CHECK(table.rows[1].label == "lstsd");
  CHECK(std::fabs(table.rows[1].mean_final - 0.7) < 1e-15);
  CHECK(std::fabs(table.rows[1].delta - 0.1) < 1e-15);

  const std::string text = table.format();
  CHECK(text.rfind("reference = vanilla\n", 0) == 0);
  CHECK(text.find("(+10.00)") != std::string::npos);
  CHECK(text.find("(-0.00)") != std::string::npos);
  CHECK(text.find("group") != std::string::npos);

  CHECK_THROWS_WITH_AS(compare_runs(labeled, "mean_teacher"),
                       doctest::Contains("groups: lstsd, vanilla"), std::invalid_argument);
  CHECK(compare_runs(labeled, "").reference == "lstsd");  // first appearance
  CHECK_THROWS_AS(compare_runs({}, "vanilla"), std::invalid_argument);
}

TEST_CASE("summaries survive a write and parse cycle") {
  RunReport r;
  r.policy = "snapshot_ensembles";
  r.seed = 5;
  r.final_test_acc = 0.123456;
  r.best_test_acc = 0.25;
  r.ensemble_test_acc = 0.5;
  r.wall_seconds = 1.5;
  r.config_echo = "dataset.kind = spiral\n";
  const RunReport back = parse_summary(report_summary(r));
  CHECK(back.policy == r.policy);
  CHECK(back.seed == 5);
  CHECK(std::fabs(back.final_test_acc - 0.123456) < 1e-9);
  CHECK(std::fabs(back.best_test_acc - 0.25) < 1e-9);
  CHECK(std::fabs(back.ensemble_test_acc - 0.5) < 1e-9);
  CHECK(std::fabs(back.wall_seconds - 1.5) < 1e-9);
}

TEST_CASE("comparable settings ignore policy knobs but keep the budget") {
  const ExperimentConfig a = parse_config(tiny_experiment());
  const ExperimentConfig b = parse_config(tiny_experiment("policy.lambda_long = 9.9\n"));
  CHECK(comparable_subset(a) == comparable_subset(b));

  // Same 24-epoch budget cut differently still compares.
  const ExperimentConfig c24a = parse_config(
      std::string(kMinimal) + "policy.mini_gen_epochs = 3\npolicy.mini_generations = 8\n");
  const ExperimentConfig c24b = parse_config(
      std::string(kMinimal) + "policy.mini_gen_epochs = 6\npolicy.mini_generations = 4\n");
  CHECK(comparable_subset(c24a) == comparable_subset(c24b));

  std::string reseeded = tiny_experiment();
  reseeded.replace(reseeded.find("dataset.seed = 9"), 16, "dataset.seed = 8");
  CHECK(comparable_subset(a) != comparable_subset(parse_config(reseeded)));
}

TEST_CASE("spiral test sets draw from the next seed") {
  const ExperimentConfig cfg = parse_config(tiny_experiment());
  const auto [train_set, test_set] = build_datasets(cfg);
  CHECK(train_set.features.data == gen_spiral(10, 3, 0.2, 9).features.data);
  CHECK(test_set.features.data == gen_spiral(5, 3, 0.2, 10).features.data);

  const ModelArch arch = make_arch(cfg, train_set);
  CHECK(arch.kind == ModelArch::Kind::mlp);
  CHECK(arch.widths == std::vector<int>{2, 8, 3});
  CHECK_THROWS_WITH_AS(
      make_arch(parse_config("dataset.kind = spiral\narch.kind = small_cnn\n"
                             "policy.kind = lstsd\nseeds = 1\n"),
                train_set),
      doctest::Contains("image features"), std::invalid_argument);
}

TEST_CASE("atomic file writes round-trip and failures are loud") {
  TempRoot root("test_config_files");
  fs::create_directories(root.path);
  const std::string path = (root.path / "a.txt").string();
  write_file_atomic(path, "hello\n");
  CHECK(read_text_file(path) == "hello\n");
  write_file_atomic(path, "rewritten\n");
  CHECK(read_text_file(path) == "rewritten\n");
  CHECK_THROWS_WITH_AS(read_text_file((root.path / "missing.txt").string()),
                       doctest::Contains("cannot open"), std::runtime_error);
  CHECK_THROWS_AS(load_config_file((root.path / "missing.cfg").string()), std::runtime_error);
}

TEST_CASE("experiments land in a content-addressed directory") {
  TempRoot root("test_config_out");
  const std::string text = tiny_experiment();
  const ExperimentConfig cfg = parse_config(text);

  RunOptions opts;
  opts.out_root = root.path.string();
  const ExperimentResult res = run_experiment(cfg, opts);
  REQUIRE(res.ok);
  REQUIRE(res.cells.size() == 4);
  for (const CellOutcome& o : res.cells) CHECK(o.ok);

  char hex[32];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(fnv1a64(text)));
  CHECK(fs::path(res.run_dir).filename().string() == hex);
  CHECK(read_text_file(res.run_dir + "/config.txt") == text);

  for (const char* stem : {"lstsd_s1", "lstsd_s2", "vanilla_s1", "vanilla_s2"}) {
    CHECK(fs::exists(fs::path(res.run_dir) / (std::string(stem) + ".csv")));
    CHECK(fs::exists(fs::path(res.run_dir) / (std::string(stem) + ".summary.txt")));
    CHECK(fs::exists(fs::path(res.run_dir) / (std::string(stem) + ".final.ckpt")));
  }

  const std::string manifest = read_text_file(res.run_dir + "/manifest.txt");
  CHECK(manifest.rfind(std::string("config_hash = ") + hex + "\ncells = 4\n", 0) == 0);
  CHECK(manifest.find("cell lstsd_s1 group=lstsd seed=1 status=ok final_test_acc=") !=
        std::string::npos);

  const std::string comparison = read_text_file(res.run_dir + "/comparison.txt");
  CHECK(comparison == res.comparison);
  CHECK(comparison.rfind("reference = vanilla\n", 0) == 0);
  CHECK(comparison.find("lstsd") != std::string::npos);

  // Reruns are byte-identical and land in the same directory.
  const std::string csv_before = read_text_file(res.run_dir + "/lstsd_s1.csv");
  const ExperimentResult rerun = run_experiment(cfg, opts);
  CHECK(rerun.run_dir == res.run_dir);
  CHECK(read_text_file(res.run_dir + "/lstsd_s1.csv") == csv_before);

  // A seed override is a different experiment with its own directory.
  RunOptions ov = opts;
  ov.seed_override = 7;
  const ExperimentResult forced = run_experiment(cfg, ov);
  CHECK(forced.run_dir != res.run_dir);
  REQUIRE(forced.cells.size() == 2);
  for (const CellOutcome& o : forced.cells) CHECK(o.cell.seed == 7);
  CHECK(fs::exists(fs::path(forced.run_dir) / "lstsd_s7.csv"));

  // Cross-directory comparison pools runs of the same group.
  const ComparisonTable pooled = compare_run_dirs({res.run_dir, forced.run_dir}, "vanilla");
  REQUIRE(pooled.rows.size() == 2);
  CHECK(pooled.rows[0].runs == 3);
  CHECK(pooled.rows[1].runs == 3);

  // A directory whose config.txt disagrees is refused outright.
  write_file_atomic(res.run_dir + "/config.txt", text + "# tampered\n");
  CHECK_THROWS_WITH_AS(run_experiment(cfg, opts), doctest::Contains("refusing to mix runs"),
                       std::runtime_error);
  write_file_atomic(res.run_dir + "/config.txt", text);

  // Comparing against a run with different data is refused too.
  std::string reseeded = text;
  reseeded.replace(reseeded.find("dataset.seed = 9"), 16, "dataset.seed = 8");
  const ExperimentResult o = run_experiment(parse_config(reseeded), opts);
  CHECK_THROWS_WITH_AS(compare_run_dirs({res.run_dir, o.run_dir}, ""),
                       doctest::Contains("differing settings: dataset.seed"),
                       std::runtime_error);
}
