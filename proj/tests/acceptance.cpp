// Acceptance gate: ten end-to-end criteria, one PASS/FAIL line each.
// Exits nonzero if any criterion fails.
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "lstsd/config.hpp"
#include "lstsd/data.hpp"
#include "lstsd/gradcheck.hpp"
#include "lstsd/policies.hpp"

using namespace lstsd;
namespace fs = std::filesystem;

namespace {

constexpr double kFdRelTol = 1e-5;        // criterion 1
constexpr int kFdMinCoords = 100;         // criterion 1
constexpr double kFdBudgetSec = 30.0;     // criterion 1
constexpr double kRecomposeTol = 1e-9;    // criterion 2
constexpr double kBranchBudgetSec = 60.0; // criterion 3
constexpr double kEmaTol = 1e-12;         // criterion 6
constexpr double kHeadlineMargin = 0.005; // criterion 7
constexpr double kHeadlineBudgetSec = 600.0;

struct Outcome {
  bool pass = false;
  std::string note;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  if (a.count() != b.count()) return false;
  for (std::size_t i = 0; i < a.count(); ++i)
    if (a.tensor(i).data != b.tensor(i).data) return false;
  return true;
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t c = t.shape[1];
  return std::vector<double>(t.data.begin() + r * c, t.data.begin() + (r + 1) * c);
}

struct EpochParams : TrainObserver {
  std::vector<ModelParams> per_epoch;
  void on_epoch_end(int, const ModelParams& params, const EpochRecord&) override {
    per_epoch.push_back(params);
  }
};

// --- 1. gradient fidelity -------------------------------------------------

Outcome c1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport rep = run_gradient_checks(7);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& e : rep.entries) worst = std::max(worst, e.max_rel_err);
  Outcome o;
  o.pass = rep.all_pass() && rep.total_checks() >= kFdMinCoords && worst < kFdRelTol &&
           secs < kFdBudgetSec;
  o.note = fmt("%zu coordinates, max rel err %.2e, %.2f s", rep.total_checks(), worst, secs);
  return o;
}

// --- 2. per-step loss recomposition ---------------------------------------

Outcome c2_recomposition() {
  struct Recompose : TrainObserver {
    int steps = 0;
    double worst = 0.0;
    void on_step(const StepRecord& rec) override {
      const double composed = compose_total(rec.breakdown.ce, rec.breakdown.kl_long,
                                            rec.breakdown.kl_short, rec.breakdown.lambda_long,
                                            rec.breakdown.lambda_short);
      worst = std::max(worst, std::fabs(rec.breakdown.total - composed));
      ++steps;
    }
  } obs;

  PolicyConfig p = PolicyConfig::make(PolicyKind::lstsd);
  p.mini_gen_epochs = 2;
  p.mini_generations = 4;
  const LabeledDataset tr = gen_spiral(40, 3, 0.2, 11);
  const LabeledDataset te = gen_spiral(10, 3, 0.2, 12);
  OptimConfig optim;
  train(p, ModelArch::mlp({2, 32, 3}), tr, te, optim, LrSchedule::step_decay(0.1), 11, &obs);

  Outcome o;
  o.pass = obs.steps > 0 && obs.worst <= kRecomposeTol && p.lambda_long == 2.4 &&
           p.lambda_short == 4.0;
  o.note = fmt("%d steps, worst |total - composed| = %.2e", obs.steps, obs.worst);
  return o;
}

// --- 3. first mini-generation equals vanilla ------------------------------

Outcome c3_branch_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const LabeledDataset tr = gen_spiral(40, 3, 0.2, 21);
  const LabeledDataset te = gen_spiral(10, 3, 0.2, 22);
  const ModelArch arch = ModelArch::mlp({2, 32, 3});
  const LrSchedule sched = LrSchedule::step_decay(0.1);
  OptimConfig optim;

  PolicyConfig lp = PolicyConfig::make(PolicyKind::lstsd);
  lp.mini_gen_epochs = 2;
  lp.mini_generations = 3;
  PolicyConfig vp = PolicyConfig::make(PolicyKind::vanilla);
  vp.mini_gen_epochs = 2;
  vp.mini_generations = 3;

  EpochParams l, v;
  train(lp, arch, tr, te, optim, sched, 33, &l);
  train(vp, arch, tr, te, optim, sched, 33, &v);
  const double secs = seconds_since(t0);

  bool first_gen_equal = l.per_epoch.size() == 6 && v.per_epoch.size() == 6;
  for (int e = 0; first_gen_equal && e < 2; ++e)
    first_gen_equal = params_equal(l.per_epoch[e], v.per_epoch[e]);
  // Sanity: the distillation terms must actually bite once teachers exist.
  const bool diverges_later = first_gen_equal && !params_equal(l.per_epoch[2], v.per_epoch[2]);

  Outcome o;
  o.pass = first_gen_equal && diverges_later && secs < kBranchBudgetSec;
  o.note = fmt("mini-generation 1 bit-identical, divergence from epoch 3: %s, %.2f s",
               diverges_later ? "yes" : "no", secs);
  return o;
}

// --- 4. teacher-store trace oracle ----------------------------------------

Outcome c4_trace_oracle() {
  struct Replay : TrainObserver {
    int n = 0, e = 0;
    std::vector<std::vector<double>> shadow_prev, shadow_curr, long_cur, long_next;
    int short_rows_ok = 0, short_rows_bad = 0;
    int long_rows_ok = 0, long_rows_bad = 0;
    int first_step_ok = 0, first_step_bad = 0;

    Replay(int n_, int e_)
        : n(n_), e(e_), shadow_prev(n_), shadow_curr(n_), long_cur(n_), long_next(n_) {}

    void on_epoch_start(int, int mini_gen, int epoch_in, const TeacherStore*) override {
      shadow_prev = shadow_curr;
      if (epoch_in == 1 && mini_gen > 1) long_cur = long_next;
    }

    void on_step(const StepRecord& rec) override {
      const std::vector<int>& ids = *rec.ids;
      if (rec.mini_gen >= 2) {
        for (std::size_t r = 0; r < ids.size(); ++r) {
          (row_of(*rec.z_short_read, r) == shadow_prev[ids[r]] ? short_rows_ok
                                                               : short_rows_bad)++;
          (row_of(*rec.z_long_read, r) == long_cur[ids[r]] ? long_rows_ok : long_rows_bad)++;
        }
        if (rec.epoch_in == 1 && rec.step == 0)
          (rec.z_long_read->data == rec.z_short_read->data ? first_step_ok : first_step_bad)++;
      }
      for (std::size_t r = 0; r < ids.size(); ++r) {
        shadow_curr[ids[r]] = row_of(*rec.loss_logits, r);
        if (rec.epoch_in == e) long_next[ids[r]] = row_of(*rec.loss_logits, r);
      }
    }
  };

  const LabeledDataset tr = gen_spiral(4, 2, 0.1, 31);  // 8 samples
  const LabeledDataset te = gen_spiral(2, 2, 0.1, 32);
  PolicyConfig p = PolicyConfig::make(PolicyKind::lstsd);
  p.mini_gen_epochs = 2;
  p.mini_generations = 3;
  OptimConfig optim;
  optim.batch_size = 2;

  Replay obs(8, p.mini_gen_epochs);
  train(p, ModelArch::mlp({2, 8, 2}), tr, te, optim, LrSchedule::step_decay(0.1), 44, &obs);

  Outcome o;
  o.pass = obs.short_rows_bad == 0 && obs.long_rows_bad == 0 && obs.first_step_bad == 0 &&
           obs.short_rows_ok == 32 && obs.long_rows_ok == 32 && obs.first_step_ok == 2;
  o.note = fmt("short reads %d/%d, long reads %d/%d, first-step z_long==z_short %d/%d",
               obs.short_rows_ok, obs.short_rows_ok + obs.short_rows_bad, obs.long_rows_ok,
               obs.long_rows_ok + obs.long_rows_bad, obs.first_step_ok,
               obs.first_step_ok + obs.first_step_bad);
  return o;
}

// --- 5. whole-dataset batches collapse both variants ----------------------

Outcome c5_single_teacher() {
  const LabeledDataset tr = gen_spiral(20, 3, 0.2, 51);  // 60 samples
  const LabeledDataset te = gen_spiral(5, 3, 0.2, 52);
  const ModelArch arch = ModelArch::mlp({2, 16, 3});
  const LrSchedule sched = LrSchedule::step_decay(0.1);
  OptimConfig optim;
  optim.batch_size = 60;  // batch == N

  bool all_equal = true;
  std::string modes;
  for (bool post : {false, true}) {
    PolicyConfig lp = PolicyConfig::make(PolicyKind::lstsd);
    PolicyConfig sp = PolicyConfig::make(PolicyKind::lstsd_single);
    lp.mini_gen_epochs = sp.mini_gen_epochs = 2;
    lp.mini_generations = sp.mini_generations = 3;
    lp.record_post_update = sp.record_post_update = post;
    EpochParams a, b;
    train(lp, arch, tr, te, optim, sched, 66, &a);
    train(sp, arch, tr, te, optim, sched, 66, &b);
    bool equal = a.per_epoch.size() == b.per_epoch.size();
    for (std::size_t i = 0; equal && i < a.per_epoch.size(); ++i)
      equal = params_equal(a.per_epoch[i], b.per_epoch[i]);
    all_equal = all_equal && equal;
    modes += fmt("%s%s-update %s", modes.empty() ? "" : ", ", post ? "post" : "pre",
                 equal ? "bit-identical" : "DIVERGED");
  }

  Outcome o;
  o.pass = all_equal;
  o.note = modes;
  return o;
}

// --- 6. baseline EMA closed forms -----------------------------------------

Outcome c6_ema_closed_forms() {
  const ModelArch arch = ModelArch::mlp({2, 4, 2});
  ModelParams ema = init_params(arch, 1);
  ModelParams cur = init_params(arch, 2);
  for (std::size_t i = 0; i < ema.count(); ++i) {
    std::fill(ema.tensor(i).data.begin(), ema.tensor(i).data.end(), 0.0);
    std::fill(cur.tensor(i).data.begin(), cur.tensor(i).data.end(), 1.0);
  }
  const double a_mt = 0.999;
  for (int step = 0; step < 5; ++step) ema = mean_teacher_update(ema, cur, a_mt);
  const double want_mt = 1.0 - std::pow(a_mt, 5);
  double err_mt = 0.0;
  for (std::size_t i = 0; i < ema.count(); ++i)
    for (double v : ema.tensor(i).data) err_mt = std::max(err_mt, std::fabs(v - want_mt));

  const double a_te = 0.6;
  Tensor Z = Tensor::zeros({3, 2});
  const Tensor z = Tensor::full({3, 2}, 1.0);
  for (int step = 0; step < 5; ++step) Z = temporal_ensemble_update(Z, z, a_te);
  const double want_te = 1.0 - std::pow(a_te, 5);
  double err_te = 0.0;
  for (double v : Z.data) err_te = std::max(err_te, std::fabs(v - want_te));

  Outcome o;
  o.pass = err_mt <= kEmaTol && err_te <= kEmaTol;
  o.note = fmt("5-step traces: mean-teacher err %.2e (alpha=%.3f), temporal err %.2e "
               "(alpha=%.1f)",
               err_mt, a_mt, err_te, a_te);
  return o;
}

// --- 7. desk-scale non-regression -----------------------------------------

Outcome c7_headline() {
  const auto t0 = std::chrono::steady_clock::now();
  const LabeledDataset tr = gen_spiral(1000, 3, 0.15, 42);
  const LabeledDataset te = gen_spiral(334, 3, 0.15, 43);
  const ModelArch arch = ModelArch::mlp({2, 64, 64, 3});
  const LrSchedule sched = LrSchedule::step_decay(0.1);
  OptimConfig optim;  // batch 32, momentum 0.9, wd 1e-4

  struct Cell {
    PolicyKind kind;
    std::uint64_t seed;
    double final_acc = 0.0;
  };
  std::vector<Cell> cells;
  for (PolicyKind k : {PolicyKind::lstsd, PolicyKind::vanilla})
    for (std::uint64_t s = 1; s <= 5; ++s) cells.push_back({k, s, 0.0});

  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      PolicyConfig p = PolicyConfig::make(cells[i].kind);
      p.mini_gen_epochs = 6;
      p.mini_generations = 5;
      const TrainResult r = train(p, arch, tr, te, optim, sched, cells[i].seed);
      cells[i].final_acc = r.report.final_test_acc;
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(hw, cells.size()); ++t)
    pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  double mean_lstsd = 0.0, mean_vanilla = 0.0;
  for (const Cell& c : cells)
    (c.kind == PolicyKind::lstsd ? mean_lstsd : mean_vanilla) += c.final_acc / 5.0;
  const double secs = seconds_since(t0);

  Outcome o;
  o.pass = mean_lstsd >= mean_vanilla - kHeadlineMargin && secs < kHeadlineBudgetSec;
  o.note = fmt("5-seed means: lstsd %.4f vs vanilla %.4f (margin %.3f), %.1f s", mean_lstsd,
               mean_vanilla, kHeadlineMargin, secs);
  return o;
}

// --- 8. ablation harness --------------------------------------------------

Outcome c8_ablations() {
  const std::string text =
      "dataset.kind = spiral\n"
      "dataset.seed = 5\n"
      "dataset.spiral.train_per_class = 20\n"
      "dataset.spiral.test_per_class = 10\n"
      "dataset.spiral.noise_std = 0.2\n"
      "arch.kind = mlp\n"
      "arch.hidden = 16\n"
      "policy.kind = lstsd,lstsd_no_long,lstsd_no_short,lstsd_single\n"
      "policy.mini_gen_epochs = 2\n"
      "policy.mini_generations = 2\n"
      "optim.batch_size = 32\n"
      "seeds = 1,2\n"
      "compare.reference = lstsd\n";
  RunOptions opts;
  opts.out_root = "acceptance_out/ablations";
  const ExperimentResult res = run_experiment(parse_config(text), opts);

  std::size_t ok = 0;
  for (const auto& c : res.cells) ok += c.ok;
  const std::string manifest = read_text_file(res.run_dir + "/manifest.txt");
  bool labels = true;
  for (const char* g : {"lstsd", "lstsd_no_long", "lstsd_no_short", "lstsd_single"})
    labels = labels && res.comparison.find(g) != std::string::npos;

  Outcome o;
  o.pass = res.ok && ok == 8 && labels &&
           res.comparison.rfind("reference = lstsd\n", 0) == 0 &&
           res.comparison.find("(-0.00)") != std::string::npos &&
           manifest.find("status=failed") == std::string::npos;
  o.note = fmt("%zu/8 cells ok, reference-relative deltas in \"(-0.00)\" format: %s", ok,
               res.comparison.find("(-0.00)") != std::string::npos ? "yes" : "no");
  return o;
}

// --- 9. mini-generation length sweep --------------------------------------

Outcome c9_sweep() {
  const std::string text =
      "dataset.kind = spiral\n"
      "dataset.seed = 6\n"
      "dataset.spiral.train_per_class = 20\n"
      "dataset.spiral.test_per_class = 10\n"
      "dataset.spiral.noise_std = 0.2\n"
      "arch.kind = mlp\n"
      "arch.hidden = 16\n"
      "policy.kind = lstsd\n"
      "policy.mini_gen_epochs = 6\n"
      "policy.mini_generations = 4\n"
      "sweep.mini_gen_epochs = 1,2,6,12\n"
      "optim.batch_size = 32\n"
      "seeds = 3\n"
      "compare.reference = lstsd_E6\n";
  RunOptions opts;
  opts.out_root = "acceptance_out/sweep";
  const ExperimentResult res = run_experiment(parse_config(text), opts);

  std::size_t ok = 0;
  for (const auto& c : res.cells) ok += c.ok;
  std::size_t rows = 0;
  for (const char* g : {"lstsd_E1", "lstsd_E2", "lstsd_E6", "lstsd_E12"})
    rows += res.comparison.find(g) != std::string::npos;

  const ExperimentResult rerun = run_experiment(parse_config(text), opts);
  const bool deterministic =
      rerun.run_dir == res.run_dir && rerun.comparison == res.comparison;

  Outcome o;
  o.pass = res.ok && ok == 4 && rows == 4 && deterministic;
  o.note = fmt("%zu/4 lengths completed at a fixed 24-epoch budget, rerun identical: %s", ok,
               deterministic ? "yes" : "no");
  return o;
}

// --- 10. byte-identical reruns --------------------------------------------

Outcome c10_determinism() {
  const std::string text =
      "dataset.kind = spiral\n"
      "dataset.seed = 7\n"
      "dataset.spiral.train_per_class = 20\n"
      "dataset.spiral.test_per_class = 10\n"
      "dataset.spiral.noise_std = 0.2\n"
      "arch.kind = mlp\n"
      "arch.hidden = 16\n"
      "policy.kind = lstsd,vanilla\n"
      "policy.mini_gen_epochs = 1\n"
      "policy.mini_generations = 2\n"
      "optim.batch_size = 32\n"
      "seeds = 1,2\n";
  RunOptions a, b;
  a.out_root = "acceptance_out/rerun_a";
  b.out_root = "acceptance_out/rerun_b";
  const ExperimentResult ra = run_experiment(parse_config(text), a);
  const ExperimentResult rb = run_experiment(parse_config(text), b);

  const bool same_dir =
      fs::path(ra.run_dir).filename() == fs::path(rb.run_dir).filename();
  std::size_t identical = 0, files = 0;
  for (const char* stem : {"lstsd_s1", "lstsd_s2", "vanilla_s1", "vanilla_s2"})
    for (const char* ext : {".csv", ".final.ckpt"}) {
      ++files;
      identical += read_text_file(ra.run_dir + "/" + stem + ext) ==
                   read_text_file(rb.run_dir + "/" + stem + ext);
    }

  Outcome o;
  o.pass = ra.ok && rb.ok && same_dir && identical == files;
  o.note = fmt("%zu/%zu artifacts byte-identical across fresh roots, hash dir %s", identical,
               files, same_dir ? "stable" : "UNSTABLE");
  return o;
}

}  // namespace

int main() {
  fs::remove_all("acceptance_out");
  struct Criterion {
    const char* label;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"gradient fidelity vs central differences", c1_gradients},
      {"per-step loss recomposition", c2_recomposition},
      {"first mini-generation matches vanilla", c3_branch_equivalence},
      {"teacher-store trace replay", c4_trace_oracle},
      {"whole-dataset batch collapses to one teacher", c5_single_teacher},
      {"baseline EMA closed forms", c6_ema_closed_forms},
      {"desk-scale non-regression", c7_headline},
      {"ablation harness with reference deltas", c8_ablations},
      {"mini-generation length sweep", c9_sweep},
      {"byte-identical reruns", c10_determinism},
  };

  int failed = 0;
  int id = 0;
  for (const Criterion& c : criteria) {
    ++id;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note = std::string("exception: ") + e.what();
    }
    std::printf("[%s] %2d. %s: %s\n", o.pass ? "PASS" : "FAIL", id, c.label, o.note.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("acceptance: %d/10 criteria passed\n", 10 - failed);
  return failed == 0 ? 0 : 1;
}
