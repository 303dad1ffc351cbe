#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lstsd/data.hpp"
#include "lstsd/distill.hpp"
#include "lstsd/nn.hpp"
#include "lstsd/optim.hpp"

namespace lstsd {

enum class PolicyKind {
  vanilla,
  lstsd,
  lstsd_no_long,
  lstsd_no_short,
  lstsd_single,
  mean_teacher,
  temporal_ensembles,
  snapshot_ensembles,
  snapshot_distillation,
};

const char* to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(const std::string& name);

// Training-policy knobs. Ablation kinds force the weight they remove to zero;
// validate() rejects configurations that contradict their own kind.
struct PolicyConfig {
  PolicyKind kind = PolicyKind::vanilla;
  double lambda_long = 2.4;
  double lambda_short = 4.0;
  double temperature = 2.0;
  int mini_gen_epochs = 6;   // E
  int mini_generations = 4;  // M
  double alpha_mean_teacher = 0.999;
  double alpha_temporal = 0.6;
  double lambda_baseline = 1.0;
  bool record_post_update = false;  // record teacher logits after the update instead of at loss time
  bool reverse_kl = false;

  static PolicyConfig make(PolicyKind kind);
  void validate() const;
  int total_epochs() const { return mini_gen_epochs * mini_generations; }
};

struct OptimConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  bool augment = false;
  int aug_pad = 4;
  double aug_flip_prob = 0.5;
};

struct EpochRecord {
  int epoch = 0;     // 1-based
  int mini_gen = 0;  // 1-based
  double lr = 0.0;
  LossBreakdown mean_loss;  // per-step arithmetic means
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  double best_test_acc = 0.0;
  double final_test_acc = 0.0;
  double ensemble_test_acc = -1.0;  // snapshot_ensembles only, -1 otherwise
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string policy;
  std::string config_echo;
};

// Hooks for trace-replay tests. `loss_logits` are the loss-time student
// logits; the z rows are the raw teacher logits read for this step (empty
// tensors when the step used no stored teacher).
struct StepRecord {
  int epoch = 0;     // 0-based
  int mini_gen = 0;  // 1-based
  int epoch_in = 0;  // 1-based within the mini-generation
  int step = 0;      // 0-based within the epoch
  const std::vector<int>* ids = nullptr;
  const Tensor* loss_logits = nullptr;
  const Tensor* z_long_read = nullptr;
  const Tensor* z_short_read = nullptr;
  LossBreakdown breakdown;
};

class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  virtual void on_epoch_start(int epoch, int mini_gen, int epoch_in, const TeacherStore* store) {
    (void)epoch, (void)mini_gen, (void)epoch_in, (void)store;
  }
  virtual void on_step(const StepRecord& rec) { (void)rec; }
  virtual void on_epoch_end(int epoch, const ModelParams& params, const EpochRecord& rec) {
    (void)epoch, (void)params, (void)rec;
  }
};

struct TrainResult {
  ModelParams params;
  RunReport report;
  std::vector<ModelParams> snapshots;  // snapshot_ensembles members, in order
};

// Runs M * E epochs of the configured policy. Identical inputs produce
// bit-identical parameters and reports.
TrainResult train(const PolicyConfig& policy, const ModelArch& arch,
                  const LabeledDataset& train_set, const LabeledDataset& test_set,
                  const OptimConfig& optim, const LrSchedule& schedule, std::uint64_t seed,
                  TrainObserver* observer = nullptr);

// EMA of parameters: ema' = alpha * ema + (1 - alpha) * current.
ModelParams mean_teacher_update(const ModelParams& ema, const ModelParams& current,
                                double alpha);

// EMA of per-sample prediction matrices: Z' = alpha * Z + (1 - alpha) * z.
Tensor temporal_ensemble_update(const Tensor& Z, const Tensor& z_epoch, double alpha);

// Mean of the member softmax distributions at temperature 1.
Tensor snapshot_ensembles_predict(const std::vector<ModelParams>& snapshots,
                                  const ModelArch& arch, const Tensor& batch);

// Top-1 accuracy; argmax ties resolve to the lowest class index.
double evaluate(const ModelParams& params, const ModelArch& arch, const LabeledDataset& ds);
double evaluate_ensemble(const std::vector<ModelParams>& snapshots, const ModelArch& arch,
                         const LabeledDataset& ds);

// CSV schema: epoch,mini_gen,lr,loss_total,loss_ce,loss_kl_long,loss_kl_short,
// train_acc,test_acc. Accuracies carry 4 decimals. Byte-deterministic.
std::string report_to_csv(const RunReport& report);

// Key-value summary followed by a verbatim config echo block.
std::string report_summary(const RunReport& report);

}  // namespace lstsd
