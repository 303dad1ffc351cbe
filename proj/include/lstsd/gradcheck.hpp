#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lstsd {

// Central-difference validation of every differentiable op plus a full
// model-level objective. The finite-difference side re-evaluates values only,
// so it shares no code with the reverse sweep it checks.

inline constexpr double kGradCheckStep = 1e-6;
inline constexpr double kGradCheckTol = 1e-5;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checks = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool all_pass() const;
  std::size_t total_checks() const;
  std::string format() const;
};

GradCheckReport run_gradient_checks(std::uint64_t seed);

}  // namespace lstsd
