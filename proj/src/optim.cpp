#include "lstsd/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace lstsd {

namespace {

void validate_milestones(const std::vector<double>& ms) {
  double prev = 0.0;
  for (double m : ms) {
    if (m <= prev || m >= 1.0)
      throw std::invalid_argument("LrSchedule: milestones must be strictly increasing in (0, 1)");
    prev = m;
  }
}

constexpr double kPi = 3.141592653589793238462643383279502884;

}  // namespace

LrSchedule LrSchedule::constant(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("LrSchedule::constant: lr must be positive");
  LrSchedule s;
  s.kind = Kind::constant;
  s.base_lr = lr;
  return s;
}

LrSchedule LrSchedule::step_decay(double base_lr, std::vector<double> milestones, double factor) {
  if (!(base_lr > 0.0)) throw std::invalid_argument("LrSchedule::step_decay: base_lr must be positive");
  if (!(factor > 0.0 && factor <= 1.0))
    throw std::invalid_argument("LrSchedule::step_decay: factor must be in (0, 1]");
  validate_milestones(milestones);
  LrSchedule s;
  s.kind = Kind::step_decay;
  s.base_lr = base_lr;
  s.milestones = std::move(milestones);
  s.factor = factor;
  return s;
}

LrSchedule LrSchedule::cyclic_cosine(double base_lr, int cycle_epochs, double floor_lr) {
  if (!(base_lr > 0.0))
    throw std::invalid_argument("LrSchedule::cyclic_cosine: base_lr must be positive");
  if (cycle_epochs < 1)
    throw std::invalid_argument("LrSchedule::cyclic_cosine: cycle_epochs must be >= 1, got " +
                                std::to_string(cycle_epochs));
  if (floor_lr < 0.0 || floor_lr >= base_lr)
    throw std::invalid_argument("LrSchedule::cyclic_cosine: floor_lr must be in [0, base_lr)");
  LrSchedule s;
  s.kind = Kind::cyclic_cosine;
  s.base_lr = base_lr;
  s.cycle_epochs = cycle_epochs;
  s.floor_lr = floor_lr;
  return s;
}

double lr_at(const LrSchedule& schedule, int epoch, int total_epochs) {
  if (total_epochs < 1)
    throw std::invalid_argument("lr_at: total_epochs must be >= 1, got " +
                                std::to_string(total_epochs));
  if (epoch < 0 || epoch >= total_epochs)
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(total_epochs) + ")");
  switch (schedule.kind) {
    case LrSchedule::Kind::constant:
      return schedule.base_lr;
    case LrSchedule::Kind::step_decay: {
      int k = 0;
      for (double m : schedule.milestones)
        if (epoch >= static_cast<int>(std::floor(m * total_epochs))) ++k;
      return schedule.base_lr * std::pow(schedule.factor, k);
    }
    case LrSchedule::Kind::cyclic_cosine: {
      const int e_in = epoch % schedule.cycle_epochs;
      const double span = schedule.base_lr - schedule.floor_lr;
      return schedule.floor_lr +
             0.5 * span * (1.0 + std::cos(kPi * e_in / schedule.cycle_epochs));
    }
  }
  throw std::logic_error("lr_at: unhandled schedule kind");
}

SgdState::SgdState(const ModelParams& params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("SgdState: momentum must be in [0, 1), got " +
                                std::to_string(momentum));
  if (weight_decay < 0.0)
    throw std::invalid_argument("SgdState: weight_decay must be >= 0, got " +
                                std::to_string(weight_decay));
  velocities_.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i)
    velocities_.push_back(Tensor::zeros(params.tensor(i).shape));
}

void sgd_nesterov_step(ModelParams& params, const std::vector<Tensor>& tracked,
                       const GradMap& grads, SgdState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_nesterov_step: lr must be positive");
  if (tracked.size() != params.count() || state.count() != params.count())
    throw std::invalid_argument("sgd_nesterov_step: parameter/tracked/state counts disagree");
  const double mu = state.momentum();
  const double wd = state.weight_decay();
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!grads.has(tracked[i]))
      throw std::invalid_argument("sgd_nesterov_step: no gradient for parameter " +
                                  params.name(i));
    const std::vector<double>& g = grads.at(tracked[i]);
    Tensor& theta = params.tensor(i);
    Tensor& v = state.velocity(i);
    if (g.size() != theta.size())
      throw std::invalid_argument("sgd_nesterov_step: gradient size mismatch for " +
                                  params.name(i));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gp = g[k] + wd * theta.data[k];
      v.data[k] = mu * v.data[k] - lr * gp;
      theta.data[k] += mu * v.data[k] - lr * gp;
    }
  }
}

}  // namespace lstsd
