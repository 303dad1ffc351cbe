#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lstsd/data.hpp"
#include "lstsd/nn.hpp"
#include "lstsd/optim.hpp"
#include "lstsd/policies.hpp"

namespace lstsd {

// Experiment description parsed from a strict line-oriented "key = value"
// text. Blank lines and lines starting with '#' are skipped; every other
// line must set a known key exactly once. policy.kind takes a comma list and
// becomes one table row per kind; at most one sweep axis may be set.
struct ExperimentConfig {
  std::string text;  // verbatim source; hashed for the run directory and echoed in summaries

  std::string dataset_kind;  // spiral | cifar10 | cifar100 | idx
  std::uint64_t dataset_seed = 42;
  int spiral_train_per_class = 1000;
  int spiral_test_per_class = 334;
  int spiral_classes = 3;
  double spiral_noise_std = 0.15;
  std::vector<std::string> cifar_train_files;
  std::vector<std::string> cifar_test_files;
  std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;
  ChannelNorm norm;

  std::string arch_kind;  // mlp | small_cnn
  std::vector<int> hidden = {64, 64};

  std::vector<PolicyKind> policy_kinds;
  PolicyConfig policy;  // shared knobs; kind and swept values are overwritten per cell
  LrSchedule schedule;
  bool cycle_epochs_set = false;  // schedule.cycle_epochs > 0 in the config
  OptimConfig optim;

  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  bool dump_dataset = false;

  std::vector<int> sweep_epochs;  // varies mini_gen_epochs at a fixed total epoch budget
  std::vector<double> sweep_lambda_long;
  std::vector<double> sweep_lambda_short;
  std::vector<double> sweep_lambda_baseline;

  std::string compare_reference = "vanilla";
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

std::uint64_t fnv1a64(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

// Train/test pair for the configured dataset. Synthetic test sets draw from
// an independent stream (dataset.seed + 1).
std::pair<LabeledDataset, LabeledDataset> build_datasets(const ExperimentConfig& cfg);

ModelArch make_arch(const ExperimentConfig& cfg, const LabeledDataset& train);

// Settings that must agree between run directories for a comparison to make
// sense, keyed by config key. Policy knobs are intentionally excluded; the
// total epoch budget is included.
std::map<std::string, std::string> comparable_subset(const ExperimentConfig& cfg);

struct RunCell {
  std::string prefix;  // file stem inside the run directory
  std::string group;   // comparison row label: kind plus any sweep suffix
  PolicyConfig policy;
  LrSchedule schedule;
  std::uint64_t seed = 0;
};

// The cell grid: policy kinds x sweep values x seeds. Snapshot-based kinds
// always run a cyclic cosine schedule whose cycle is the mini-generation
// length unless schedule.cycle_epochs pins it.
std::vector<RunCell> enumerate_cells(const ExperimentConfig& cfg);

struct RunOptions {
  std::string out_root;  // beats out.dir, which beats $LSTSD_OUT_ROOT, which beats "runs"
  std::optional<std::uint64_t> seed_override;
  int jobs = 1;
};

struct CellOutcome {
  RunCell cell;
  bool ok = false;
  std::string error;
  RunReport report;
};

struct ExperimentResult {
  std::string run_dir;
  std::vector<CellOutcome> cells;
  std::string comparison;  // formatted table; empty when no cell succeeded
  bool ok = false;
};

// Runs every cell and writes, under <out_root>/<16-hex config hash>:
// config.txt, per-cell <prefix>.csv / .summary.txt / .final.ckpt,
// manifest.txt and comparison.txt. A directory whose config.txt differs from
// the config being run is refused. Reruns rewrite byte-identical CSVs.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct ComparisonRow {
  std::string label;
  std::size_t runs = 0;
  double mean_final = 0.0;  // fractions; format() scales to percent
  double std_final = 0.0;   // population std
  double mean_best = 0.0;
  double delta = 0.0;       // mean_final - reference mean_final
  bool is_reference = false;
};

struct ComparisonTable {
  std::string reference;
  std::vector<ComparisonRow> rows;  // reference first, then first-appearance order

  std::string format() const;
};

// Delta column text, percent with sign: "(+1.02)"; a delta that rounds to
// 0.00 renders as "(-0.00)".
std::string format_delta(double delta);

ComparisonTable compare_runs(const std::vector<std::pair<std::string, RunReport>>& labeled,
                             const std::string& reference);

// Key-value half of a summary file back into a report (epochs stay empty).
RunReport parse_summary(const std::string& text);

// Cross-directory comparison: loads each directory's config, manifest and
// summaries, and rejects directories whose comparable settings disagree.
ComparisonTable compare_run_dirs(const std::vector<std::string>& dirs,
                                 const std::string& reference = "");

}  // namespace lstsd
