#pragma once

#include <vector>

#include "lstsd/nn.hpp"
#include "lstsd/tensor.hpp"

namespace lstsd {

// Epoch-indexed learning-rate policies. step_decay divides the base rate by
// 1/factor at fixed fractions of the total run; cyclic_cosine anneals from
// the base rate to floor_lr inside every cycle and restarts.
struct LrSchedule {
  enum class Kind { constant, step_decay, cyclic_cosine };

  Kind kind = Kind::step_decay;
  double base_lr = 0.1;
  std::vector<double> milestones = {0.25, 0.5, 0.75};
  double factor = 0.1;
  int cycle_epochs = 6;
  double floor_lr = 0.0;

  static LrSchedule constant(double lr);
  static LrSchedule step_decay(double base_lr, std::vector<double> milestones = {0.25, 0.5, 0.75},
                               double factor = 0.1);
  static LrSchedule cyclic_cosine(double base_lr, int cycle_epochs, double floor_lr = 0.0);
};

double lr_at(const LrSchedule& schedule, int epoch, int total_epochs);

// Per-parameter velocity buffers plus the fixed hyperparameters.
class SgdState {
 public:
  SgdState() = default;
  SgdState(const ModelParams& params, double momentum, double weight_decay);

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  std::size_t count() const { return velocities_.size(); }
  Tensor& velocity(std::size_t i) { return velocities_[i]; }

 private:
  std::vector<Tensor> velocities_;
  double momentum_ = 0.0;
  double weight_decay_ = 0.0;
};

// Nesterov momentum step in look-ahead form. For every parameter scalar:
//   g' = g + weight_decay * theta
//   v  = momentum * v - lr * g'
//   theta += momentum * v - lr * g'
// With momentum = 0 and weight_decay = 0 this reduces to plain SGD exactly.
// `tracked` binds each parameter to its tape leaf so grads can be looked up.
void sgd_nesterov_step(ModelParams& params, const std::vector<Tensor>& tracked,
                       const GradMap& grads, SgdState& state, double lr);

}  // namespace lstsd
