#include "lstsd/policies.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>

namespace lstsd {

namespace {

const struct {
  PolicyKind kind;
  const char* name;
} kPolicyNames[] = {
    {PolicyKind::vanilla, "vanilla"},
    {PolicyKind::lstsd, "lstsd"},
    {PolicyKind::lstsd_no_long, "lstsd_no_long"},
    {PolicyKind::lstsd_no_short, "lstsd_no_short"},
    {PolicyKind::lstsd_single, "lstsd_single"},
    {PolicyKind::mean_teacher, "mean_teacher"},
    {PolicyKind::temporal_ensembles, "temporal_ensembles"},
    {PolicyKind::snapshot_ensembles, "snapshot_ensembles"},
    {PolicyKind::snapshot_distillation, "snapshot_distillation"},
};

}  // namespace

const char* to_string(PolicyKind kind) {
  for (const auto& e : kPolicyNames)
    if (e.kind == kind) return e.name;
  throw std::logic_error("to_string: unhandled policy kind");
}

PolicyKind policy_kind_from_string(const std::string& name) {
  for (const auto& e : kPolicyNames)
    if (name == e.name) return e.kind;
  std::string known;
  for (const auto& e : kPolicyNames) {
    if (!known.empty()) known += ", ";
    known += e.name;
  }
  throw std::invalid_argument("unknown policy kind '" + name + "'; known kinds: " + known);
}

PolicyConfig PolicyConfig::make(PolicyKind kind) {
  PolicyConfig c;
  c.kind = kind;
  if (kind == PolicyKind::lstsd_no_long) c.lambda_long = 0.0;
  if (kind == PolicyKind::lstsd_no_short) c.lambda_short = 0.0;
  return c;
}

void PolicyConfig::validate() const {
  if (lambda_long < 0.0 || lambda_short < 0.0 || lambda_baseline < 0.0)
    throw std::invalid_argument("PolicyConfig: teacher weights must be >= 0");
  if (!(temperature > 0.0))
    throw std::invalid_argument("PolicyConfig: temperature must be positive");
  if (mini_gen_epochs < 1 || mini_generations < 1)
    throw std::invalid_argument("PolicyConfig: mini_gen_epochs and mini_generations must be >= 1");
  if (alpha_mean_teacher < 0.0 || alpha_mean_teacher >= 1.0)
    throw std::invalid_argument("PolicyConfig: alpha_mean_teacher must be in [0, 1)");
  if (alpha_temporal < 0.0 || alpha_temporal >= 1.0)
    throw std::invalid_argument("PolicyConfig: alpha_temporal must be in [0, 1)");
  if (kind == PolicyKind::lstsd_no_long && lambda_long != 0.0)
    throw std::invalid_argument(
        "PolicyConfig: lstsd_no_long removes the long-term teacher; lambda_long must be 0");
  if (kind == PolicyKind::lstsd_no_short && lambda_short != 0.0)
    throw std::invalid_argument(
        "PolicyConfig: lstsd_no_short removes the short-term teacher; lambda_short must be 0");
}

ModelParams mean_teacher_update(const ModelParams& ema, const ModelParams& current,
                                double alpha) {
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("mean_teacher_update: alpha must be in [0, 1)");
  if (ema.count() != current.count())
    throw std::invalid_argument("mean_teacher_update: parameter counts disagree: " +
                                std::to_string(ema.count()) + " vs " +
                                std::to_string(current.count()));
  ModelParams out;
  for (std::size_t i = 0; i < ema.count(); ++i) {
    const Tensor& e = ema.tensor(i);
    const Tensor& c = current.tensor(i);
    if (e.shape != c.shape)
      throw std::invalid_argument("mean_teacher_update: shape mismatch for parameter " +
                                  ema.name(i) + ": " + shape_str(e.shape) + " vs " +
                                  shape_str(c.shape));
    Tensor t = Tensor::zeros(e.shape);
    for (std::size_t k = 0; k < t.size(); ++k)
      t.data[k] = alpha * e.data[k] + (1.0 - alpha) * c.data[k];
    out.add(ema.name(i), std::move(t));
  }
  return out;
}

Tensor temporal_ensemble_update(const Tensor& Z, const Tensor& z_epoch, double alpha) {
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("temporal_ensemble_update: alpha must be in [0, 1)");
  if (Z.shape != z_epoch.shape)
    throw std::invalid_argument("temporal_ensemble_update: shapes disagree: " +
                                shape_str(Z.shape) + " vs " + shape_str(z_epoch.shape));
  Tensor out = Tensor::zeros(Z.shape);
  for (std::size_t k = 0; k < out.size(); ++k)
    out.data[k] = alpha * Z.data[k] + (1.0 - alpha) * z_epoch.data[k];
  return out;
}

Tensor snapshot_ensembles_predict(const std::vector<ModelParams>& snapshots,
                                  const ModelArch& arch, const Tensor& batch) {
  if (snapshots.empty())
    throw std::invalid_argument("snapshot_ensembles_predict: no snapshots to ensemble");
  Tensor acc;
  for (const ModelParams& s : snapshots) {
    Tensor p = softmax_t(forward(s, arch, batch), 1.0);
    if (acc.size() == 0)
      acc = p;
    else
      for (std::size_t k = 0; k < acc.size(); ++k) acc.data[k] += p.data[k];
  }
  for (double& v : acc.data) v /= static_cast<double>(snapshots.size());
  return acc;
}

namespace {

constexpr int kEvalBatch = 256;

std::size_t argmax_row(const double* row, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < c; ++k)
    if (row[k] > row[best]) best = k;  // ties keep the lowest class index
  return best;
}

template <typename Predict>
double accuracy_over(const LabeledDataset& ds, Predict&& predict) {
  const std::size_t n = ds.size();
  std::size_t correct = 0;
  std::vector<int> ids;
  for (std::size_t start = 0; start < n; start += kEvalBatch) {
    const std::size_t end = std::min(n, start + kEvalBatch);
    ids.clear();
    for (std::size_t i = start; i < end; ++i) ids.push_back(static_cast<int>(i));
    const Tensor scores = predict(ds.gather(ids));
    const std::size_t c = scores.shape[1];
    for (std::size_t r = 0; r < ids.size(); ++r)
      if (argmax_row(scores.data.data() + r * c, c) ==
          static_cast<std::size_t>(ds.labels[ids[r]]))
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace

double evaluate(const ModelParams& params, const ModelArch& arch, const LabeledDataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  return accuracy_over(ds, [&](const Tensor& b) { return forward(params, arch, b); });
}

double evaluate_ensemble(const std::vector<ModelParams>& snapshots, const ModelArch& arch,
                         const LabeledDataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate_ensemble: empty dataset");
  return accuracy_over(
      ds, [&](const Tensor& b) { return snapshot_ensembles_predict(snapshots, arch, b); });
}

namespace {

struct LossAccum {
  double ce = 0.0, kl_long = 0.0, kl_short = 0.0, total = 0.0;
  double lambda_long = 0.0, lambda_short = 0.0;
  std::size_t steps = 0;

  void add(const LossBreakdown& b) {
    ce += b.ce;
    kl_long += b.kl_long;
    kl_short += b.kl_short;
    total += b.total;
    lambda_long = b.lambda_long;
    lambda_short = b.lambda_short;
    ++steps;
  }

  LossBreakdown mean() const {
    LossBreakdown b;
    const double n = static_cast<double>(steps);
    b.ce = ce / n;
    b.kl_long = kl_long / n;
    b.kl_short = kl_short / n;
    b.total = total / n;
    b.lambda_long = lambda_long;
    b.lambda_short = lambda_short;
    return b;
  }
};

bool uses_teacher_store(PolicyKind k) {
  return k == PolicyKind::lstsd || k == PolicyKind::lstsd_no_long ||
         k == PolicyKind::lstsd_no_short || k == PolicyKind::lstsd_single;
}

Tensor make_batch(const LabeledDataset& ds, const std::vector<int>& ids,
                  const OptimConfig& oc, std::uint64_t seed, int epoch) {
  if (!oc.augment) return ds.gather(ids);
  Shape s = ds.features.shape;
  s[0] = ids.size();
  Tensor out = Tensor::zeros(std::move(s));
  const std::size_t stride = out.size() / ids.size();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    RngStream rng(seed, RngStream::kAugment, static_cast<std::uint64_t>(epoch),
                  static_cast<std::uint64_t>(ids[r]));
    const Tensor img =
        augment_pad_crop_flip(ds.sample(ids[r]), oc.aug_pad, oc.aug_flip_prob, rng);
    std::copy_n(img.data.begin(), stride, out.data.begin() + r * stride);
  }
  return out;
}

// Shared-teacher rows for lstsd_single: one clean full-dataset pass with the
// parameters of the final step of the epoch, before that step's update (after
// it when post-update recording is configured). With batch size == N this
// reproduces the per-sample store exactly.
void materialize_single_rows(TeacherStore& store, const ModelArch& arch,
                             const ModelParams& params, const LabeledDataset& train_set,
                             bool write_long, int batch_size) {
  const int n = static_cast<int>(train_set.size());
  std::vector<int> ids;
  for (int start = 0; start < n; start += batch_size) {
    ids.clear();
    for (int i = start; i < std::min(n, start + batch_size); ++i) ids.push_back(i);
    const Tensor logits = forward(params, arch, train_set.gather(ids));
    store.record_short(ids, logits);
    if (write_long) store.record_long(ids, logits);
  }
}

// Gather Z rows for a batch and renormalize each row to sum to 1.
Tensor temporal_targets(const Tensor& Z, const std::vector<int>& ids) {
  const std::size_t c = Z.shape[1];
  Tensor out = Tensor::zeros({ids.size(), c});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      out.data[r * c + k] = Z.data[static_cast<std::size_t>(ids[r]) * c + k];
      sum += out.data[r * c + k];
    }
    if (!(sum > 0.0))
      throw std::logic_error("temporal_targets: degenerate ensemble row for sample " +
                             std::to_string(ids[r]));
    for (std::size_t k = 0; k < c; ++k) out.data[r * c + k] /= sum;
  }
  return out;
}

}  // namespace

TrainResult train(const PolicyConfig& policy, const ModelArch& arch,
                  const LabeledDataset& train_set, const LabeledDataset& test_set,
                  const OptimConfig& optim, const LrSchedule& schedule, std::uint64_t seed,
                  TrainObserver* observer) {
  policy.validate();
  if (train_set.size() == 0 || test_set.size() == 0)
    throw std::invalid_argument("train: datasets must be non-empty");
  if (train_set.num_classes != arch.num_classes || test_set.num_classes != arch.num_classes)
    throw std::invalid_argument("train: dataset classes (" +
                                std::to_string(train_set.num_classes) + "/" +
                                std::to_string(test_set.num_classes) +
                                ") disagree with model classes (" +
                                std::to_string(arch.num_classes) + ")");
  if (optim.batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1, got " +
                                std::to_string(optim.batch_size));
  const std::size_t want_rank = arch.kind == ModelArch::Kind::mlp ? 2 : 4;
  if (train_set.features.rank() != want_rank)
    throw std::invalid_argument("train: " + arch.describe() + " expects rank-" +
                                std::to_string(want_rank) + " features, got " +
                                shape_str(train_set.features.shape));
  if (optim.augment && train_set.features.rank() != 4)
    throw std::invalid_argument("train: augmentation requires image features, got " +
                                shape_str(train_set.features.shape));
  const bool snapshot_kind = policy.kind == PolicyKind::snapshot_ensembles ||
                             policy.kind == PolicyKind::snapshot_distillation;
  if (snapshot_kind) {
    if (schedule.kind != LrSchedule::Kind::cyclic_cosine)
      throw std::invalid_argument(std::string("train: ") + to_string(policy.kind) +
                                  " requires the cyclic_cosine schedule");
    if (schedule.cycle_epochs != policy.mini_gen_epochs)
      throw std::invalid_argument("train: cyclic cycle length " +
                                  std::to_string(schedule.cycle_epochs) +
                                  " must equal mini_gen_epochs " +
                                  std::to_string(policy.mini_gen_epochs));
  }

  const auto t0 = std::chrono::steady_clock::now();
  const int n = static_cast<int>(train_set.size());
  const int num_classes = arch.num_classes;
  const int total_epochs = policy.total_epochs();

  ModelParams params = init_params(arch, seed);
  SgdState state(params, optim.momentum, optim.weight_decay);

  std::optional<TeacherStore> store;
  if (uses_teacher_store(policy.kind)) store.emplace(n, num_classes);

  ModelParams ema;
  if (policy.kind == PolicyKind::mean_teacher) ema = mean_teacher_update(params, params, 0.0);

  Tensor Z;  // temporal_ensembles running matrix
  Tensor epoch_probs;
  if (policy.kind == PolicyKind::temporal_ensembles)
    epoch_probs = Tensor::zeros({static_cast<std::size_t>(n),
                                 static_cast<std::size_t>(num_classes)});

  std::optional<ModelParams> sd_teacher;  // snapshot_distillation frozen teacher
  std::vector<ModelParams> snapshots;

  TrainResult result;
  result.report.seed = seed;
  result.report.policy = to_string(policy.kind);

  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const int m = epoch / policy.mini_gen_epochs + 1;
    const int e_in = epoch % policy.mini_gen_epochs + 1;
    const bool final_epoch = e_in == policy.mini_gen_epochs;
    const double lr = lr_at(schedule, epoch, total_epochs);
    if (store) store->allow_long_writes(final_epoch);
    if (observer) observer->on_epoch_start(epoch, m, e_in, store ? &*store : nullptr);

    const EpochOrder order = shuffle_epoch(n, seed, epoch);
    const auto batch_ids = batches(order, optim.batch_size);
    LossAccum acc;

    for (std::size_t step = 0; step < batch_ids.size(); ++step) {
      const std::vector<int>& ids = batch_ids[step];
      const Tensor batch = make_batch(train_set, ids, optim, seed, epoch);
      std::vector<int> labels(ids.size());
      for (std::size_t r = 0; r < ids.size(); ++r) labels[r] = train_set.labels[ids[r]];

      Tape tape;
      std::vector<Tensor> tracked;
      tracked.reserve(params.count());
      for (std::size_t i = 0; i < params.count(); ++i)
        tracked.push_back(tape.leaf(params.tensor(i)));
      Tensor logits = forward(tape, arch, tracked, batch);
      const Tensor logits_val = detach(logits);

      Tensor loss;
      LossBreakdown bd;
      Tensor zl_rows, zs_rows;
      switch (policy.kind) {
        case PolicyKind::vanilla:
        case PolicyKind::snapshot_ensembles: {
          loss = tape.cross_entropy(logits, labels);
          bd.ce = bd.total = loss.value();
          break;
        }
        case PolicyKind::lstsd:
        case PolicyKind::lstsd_no_long:
        case PolicyKind::lstsd_no_short:
        case PolicyKind::lstsd_single: {
          AssembledLoss a =
              assemble_loss(tape, logits, labels, *store, ids, policy.lambda_long,
                            policy.lambda_short, policy.temperature, m, policy.reverse_kl);
          loss = a.total;
          bd = a.breakdown;
          zl_rows = std::move(a.long_rows);
          zs_rows = std::move(a.short_rows);
          break;
        }
        case PolicyKind::mean_teacher: {
          Tensor ce = tape.cross_entropy(logits, labels);
          bd.ce = ce.value();
          bd.lambda_short = policy.lambda_baseline;
          if (policy.lambda_baseline > 0.0) {
            const Tensor targets =
                softmax_t(forward(ema, arch, batch), policy.temperature);
            Tensor kl =
                tape.kl_divergence(logits, targets, policy.temperature, policy.reverse_kl);
            bd.kl_short = kl.value();
            loss = tape.add(ce, tape.scale(kl, policy.lambda_baseline));
          } else {
            loss = ce;
          }
          bd.total = loss.value();
          break;
        }
        case PolicyKind::temporal_ensembles: {
          Tensor ce = tape.cross_entropy(logits, labels);
          bd.ce = ce.value();
          bd.lambda_short = policy.lambda_baseline;
          if (epoch >= 1 && policy.lambda_baseline > 0.0) {
            const Tensor targets = temporal_targets(Z, ids);
            Tensor kl =
                tape.kl_divergence(logits, targets, policy.temperature, policy.reverse_kl);
            bd.kl_short = kl.value();
            loss = tape.add(ce, tape.scale(kl, policy.lambda_baseline));
          } else {
            loss = ce;
          }
          bd.total = loss.value();
          break;
        }
        case PolicyKind::snapshot_distillation: {
          Tensor ce = tape.cross_entropy(logits, labels);
          bd.ce = ce.value();
          bd.lambda_long = policy.lambda_baseline;
          if (m > 1 && policy.lambda_baseline > 0.0) {
            const Tensor targets =
                softmax_t(forward(*sd_teacher, arch, batch), policy.temperature);
            Tensor kl =
                tape.kl_divergence(logits, targets, policy.temperature, policy.reverse_kl);
            bd.kl_long = kl.value();
            loss = tape.add(ce, tape.scale(kl, policy.lambda_baseline));
          } else {
            loss = ce;
          }
          bd.total = loss.value();
          break;
        }
      }

      GradMap grads = tape.backward(loss);

      if (observer) {
        StepRecord rec;
        rec.epoch = epoch;
        rec.mini_gen = m;
        rec.epoch_in = e_in;
        rec.step = static_cast<int>(step);
        rec.ids = &ids;
        rec.loss_logits = &logits_val;
        rec.z_long_read = &zl_rows;
        rec.z_short_read = &zs_rows;
        rec.breakdown = bd;
        observer->on_step(rec);
      }

      const bool final_step = step + 1 == batch_ids.size();
      if (policy.kind == PolicyKind::lstsd_single && final_step && !policy.record_post_update)
        materialize_single_rows(*store, arch, params, train_set, final_epoch,
                                optim.batch_size);

      sgd_nesterov_step(params, tracked, grads, state, lr);

      if (policy.kind == PolicyKind::mean_teacher)
        ema = mean_teacher_update(ema, params, policy.alpha_mean_teacher);

      if (store && policy.kind != PolicyKind::lstsd_single) {
        const Tensor rec_logits =
            policy.record_post_update ? forward(params, arch, batch) : logits_val;
        store->record_short(ids, rec_logits);
        if (final_epoch) store->record_long(ids, rec_logits);
      }
      if (policy.kind == PolicyKind::lstsd_single && final_step && policy.record_post_update)
        materialize_single_rows(*store, arch, params, train_set, final_epoch,
                                optim.batch_size);

      if (policy.kind == PolicyKind::temporal_ensembles) {
        const Tensor probs = softmax_t(logits_val, policy.temperature);
        for (std::size_t r = 0; r < ids.size(); ++r)
          std::copy_n(probs.data.begin() + r * num_classes, num_classes,
                      epoch_probs.data.begin() +
                          static_cast<std::size_t>(ids[r]) * num_classes);
      }

      acc.add(bd);
    }

    if (policy.kind == PolicyKind::temporal_ensembles)
      Z = epoch == 0 ? epoch_probs
                     : temporal_ensemble_update(Z, epoch_probs, policy.alpha_temporal);
    if (final_epoch && policy.kind == PolicyKind::snapshot_distillation)
      sd_teacher = params;
    if (final_epoch && policy.kind == PolicyKind::snapshot_ensembles)
      snapshots.push_back(params);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.mini_gen = m;
    rec.lr = lr;
    rec.mean_loss = acc.mean();
    rec.train_acc = evaluate(params, arch, train_set);
    rec.test_acc = evaluate(params, arch, test_set);
    result.report.epochs.push_back(rec);
    if (observer) observer->on_epoch_end(epoch, params, rec);
  }

  result.report.final_test_acc = result.report.epochs.back().test_acc;
  result.report.best_test_acc = 0.0;
  for (const auto& r : result.report.epochs)
    result.report.best_test_acc = std::max(result.report.best_test_acc, r.test_acc);
  if (policy.kind == PolicyKind::snapshot_ensembles)
    result.report.ensemble_test_acc = evaluate_ensemble(snapshots, arch, test_set);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.params = std::move(params);
  result.snapshots = std::move(snapshots);
  return result;
}

std::string report_to_csv(const RunReport& report) {
  std::string out =
      "epoch,mini_gen,lr,loss_total,loss_ce,loss_kl_long,loss_kl_short,train_acc,test_acc\n";
  char buf[256];
  for (const auto& r : report.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.10g,%.9f,%.9f,%.9f,%.9f,%.4f,%.4f\n", r.epoch,
                  r.mini_gen, r.lr, r.mean_loss.total, r.mean_loss.ce, r.mean_loss.kl_long,
                  r.mean_loss.kl_short, r.train_acc, r.test_acc);
    out += buf;
  }
  return out;
}

std::string report_summary(const RunReport& report) {
  char buf[256];
  std::string out;
  out += "policy = " + report.policy + "\n";
  std::snprintf(buf, sizeof buf, "seed = %llu\n",
                static_cast<unsigned long long>(report.seed));
  out += buf;
  std::snprintf(buf, sizeof buf, "epochs = %zu\n", report.epochs.size());
  out += buf;
  std::snprintf(buf, sizeof buf, "final_test_acc = %.6f\n", report.final_test_acc);
  out += buf;
  std::snprintf(buf, sizeof buf, "best_test_acc = %.6f\n", report.best_test_acc);
  out += buf;
  if (report.ensemble_test_acc >= 0.0) {
    std::snprintf(buf, sizeof buf, "ensemble_test_acc = %.6f\n", report.ensemble_test_acc);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "wall_seconds = %.3f\n", report.wall_seconds);
  out += buf;
  out += "config_echo:\n";
  out += report.config_echo;
  if (!report.config_echo.empty() && report.config_echo.back() != '\n') out += '\n';
  return out;
}

}  // namespace lstsd
