#include "lstsd/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <utility>

#include "lstsd/data.hpp"
#include "lstsd/nn.hpp"
#include "lstsd/rng.hpp"
#include "lstsd/tensor.hpp"

namespace lstsd {

bool GradCheckReport::all_pass() const {
  for (const auto& e : entries)
    if (!e.pass) return false;
  return !entries.empty();
}

std::size_t GradCheckReport::total_checks() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.checks;
  return n;
}

std::string GradCheckReport::format() const {
  std::string out;
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-28s %4zu coords  max_rel %.3e  %s\n", e.name.c_str(),
                  e.checks, e.max_rel_err, e.pass ? "ok" : "FAIL");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%zu/%zu checks passed (%zu coordinates, tol %.0e)\n",
                entries.size() - [&] {
                  std::size_t f = 0;
                  for (const auto& e : entries) f += e.pass ? 0 : 1;
                  return f;
                }(),
                entries.size(), total_checks(), kGradCheckTol);
  out += buf;
  return out;
}

namespace {

using BuildFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

Tensor randn(Shape shape, std::uint64_t seed, std::uint64_t tag, double sd) {
  RngStream rng(seed, RngStream::kInit, tag);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = sd * rng.next_gaussian();
  return t;
}

// Keeps coordinates away from the relu kink so central differences stay valid.
Tensor randn_off_zero(Shape shape, std::uint64_t seed, std::uint64_t tag, double sd) {
  Tensor t = randn(std::move(shape), seed, tag, sd);
  for (double& v : t.data)
    if (std::fabs(v) < 0.05) v += v < 0.0 ? -0.1 : 0.1;
  return t;
}

Tensor softmax_rows(const Tensor& logits) { return softmax_t(logits, 1.0); }

GradCheckEntry check_one(const std::string& name, std::vector<Tensor> inputs,
                         const BuildFn& build) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const Tensor& in : inputs) tracked.push_back(tape.leaf(in));
    Tensor loss = build(tape, tracked);
    if (loss.size() != 1)
      throw std::logic_error("gradcheck '" + name + "': objective must be scalar, got " +
                             shape_str(loss.shape));
    GradMap grads = tape.backward(loss);
    for (const Tensor& t : tracked)
      analytic.push_back(grads.has(t) ? grads.at(t)
                                      : std::vector<double>(t.size(), 0.0));
  }

  // Value-only re-evaluation: untracked inputs keep the tape empty.
  const auto eval = [&]() {
    Tape tape;
    return build(tape, inputs).value();
  };

  GradCheckEntry entry;
  entry.name = name;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t j = 0; j < inputs[k].size(); ++j) {
      double& v = inputs[k].data[j];
      const double saved = v;
      v = saved + kGradCheckStep;
      const double f_hi = eval();
      v = saved - kGradCheckStep;
      const double f_lo = eval();
      v = saved;
      const double fd = (f_hi - f_lo) / (2.0 * kGradCheckStep);
      const double g = analytic[k][j];
      const double rel =
          std::fabs(fd - g) / std::max({std::fabs(g), std::fabs(fd), 1e-2});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checks;
    }
  }
  entry.pass = entry.max_rel_err < kGradCheckTol;
  return entry;
}

// Scalarizes a [r, c] intermediate as q · M · p so every entry of M gets a
// distinct cotangent.
Tensor project(Tape& tape, Tensor m, const Tensor& q, const Tensor& p) {
  return tape.sum(tape.matmul(tape.matmul(q, std::move(m)), p));
}

GradCheckEntry check_composite(std::uint64_t seed) {
  const ModelArch arch = ModelArch::mlp({2, 16, 3});
  ModelParams params = init_params(arch, seed);
  const LabeledDataset ds = gen_spiral(4, 3, 0.1, seed + 900);
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(ds.size()); ++i) ids.push_back(i);
  const Tensor batch = ds.gather(ids);
  const std::vector<int> labels = ds.labels;
  const Tensor q_long = softmax_rows(randn({ds.size(), 3}, seed, 71, 1.0));
  const Tensor q_short = softmax_rows(randn({ds.size(), 3}, seed, 72, 1.0));
  const double T = 2.0;

  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < params.count(); ++i) inputs.push_back(params.tensor(i));

  return check_one(
      "composite_mlp_objective[" + std::to_string(seed) + "]", std::move(inputs),
      [&](Tape& tape, const std::vector<Tensor>& tracked) {
        Tensor logits = forward(tape, arch, tracked, batch);
        Tensor ce = tape.cross_entropy(logits, labels);
        Tensor kl_l = tape.kl_divergence(logits, q_long, T);
        Tensor kl_s = tape.kl_divergence(logits, q_short, T);
        return tape.add(
            ce, tape.add(tape.scale(kl_l, 2.4), tape.scale(kl_s, 4.0)));
      });
}

}  // namespace

GradCheckReport run_gradient_checks(std::uint64_t seed) {
  GradCheckReport report;
  auto add = [&](GradCheckEntry e) { report.entries.push_back(std::move(e)); };

  {
    const Tensor q = randn({1, 3}, seed, 1, 1.0);
    const Tensor p = randn({2, 1}, seed, 2, 1.0);
    add(check_one("matmul", {randn({3, 4}, seed, 3, 0.8), randn({4, 2}, seed, 4, 0.8)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.matmul(in[0], in[1]), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 2}, seed, 5, 1.0);
    const Tensor p = randn({75, 1}, seed, 6, 0.5);
    add(check_one("conv2d_s1p1",
                  {randn({2, 2, 5, 5}, seed, 7, 0.7), randn({3, 2, 3, 3}, seed, 8, 0.7)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.flatten(t.conv2d(in[0], in[1], 1, 1)), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 2}, seed, 9, 1.0);
    const Tensor p = randn({12, 1}, seed, 10, 0.5);
    add(check_one("conv2d_s2p0",
                  {randn({2, 2, 5, 5}, seed, 11, 0.7), randn({3, 2, 3, 3}, seed, 12, 0.7)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.flatten(t.conv2d(in[0], in[1], 2, 0)), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 3}, seed, 13, 1.0);
    const Tensor p = randn({4, 1}, seed, 14, 1.0);
    add(check_one("relu", {randn_off_zero({3, 4}, seed, 15, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.relu(in[0]), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 2}, seed, 16, 1.0);
    const Tensor p = randn({8, 1}, seed, 17, 1.0);
    add(check_one("maxpool2", {randn({2, 2, 4, 4}, seed, 18, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.flatten(t.maxpool2(in[0])), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 3}, seed, 19, 1.0);
    const Tensor p = randn({3, 1}, seed, 20, 1.0);
    add(check_one("add", {randn({3, 3}, seed, 21, 1.0), randn({3, 3}, seed, 22, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.add(in[0], in[1]), q, p);
                  }));
    add(check_one("scale", {randn({3, 3}, seed, 23, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.scale(in[0], 1.7), q, p);
                  }));
  }
  add(check_one("sum", {randn({3, 4}, seed, 24, 1.0)},
                [&](Tape& t, const std::vector<Tensor>& in) { return t.sum(in[0]); }));
  {
    const Tensor q = randn({1, 4}, seed, 25, 1.0);
    const Tensor p = randn({3, 1}, seed, 26, 1.0);
    add(check_one("add_row_bias", {randn({4, 3}, seed, 27, 1.0), randn({3}, seed, 28, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.add_row_bias(in[0], in[1]), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 2}, seed, 29, 1.0);
    const Tensor p = randn({48, 1}, seed, 30, 0.5);
    add(check_one("add_channel_bias",
                  {randn({2, 3, 4, 4}, seed, 31, 1.0), randn({3}, seed, 32, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.flatten(t.add_channel_bias(in[0], in[1])), q, p);
                  }));
  }
  {
    const Tensor q = randn({1, 3}, seed, 33, 1.0);
    const Tensor p = randn({4, 1}, seed, 34, 1.0);
    add(check_one("softmax_t", {randn({3, 4}, seed, 35, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.softmax_t(in[0], 2.0), q, p);
                  }));
    add(check_one("log_softmax_t", {randn({3, 4}, seed, 36, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return project(t, t.log_softmax_t(in[0], 2.0), q, p);
                  }));
  }
  {
    const std::vector<int> labels = {0, 1, 2, 3};
    add(check_one("cross_entropy", {randn({4, 5}, seed, 37, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return t.cross_entropy(in[0], labels);
                  }));
  }
  {
    const Tensor teacher = softmax_rows(randn({4, 5}, seed, 38, 1.0));
    add(check_one("kl_divergence_T2", {randn({4, 5}, seed, 39, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return t.kl_divergence(in[0], teacher, 2.0);
                  }));
    add(check_one("kl_divergence_T1", {randn({4, 5}, seed, 40, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return t.kl_divergence(in[0], teacher, 1.0);
                  }));
    add(check_one("kl_divergence_reverse", {randn({4, 5}, seed, 41, 1.0)},
                  [&](Tape& t, const std::vector<Tensor>& in) {
                    return t.kl_divergence(in[0], teacher, 2.0, true);
                  }));
  }

  // Two full-model passes over a 16-hidden MLP cover 198 parameter
  // coordinates through the complete distillation objective.
  add(check_composite(seed));
  add(check_composite(seed + 1));

  return report;
}

}  // namespace lstsd
