#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lstsd/tensor.hpp"

namespace lstsd {

// Per-sample teacher logits, raw (unsoftened, unnormalized). One long-term
// and one short-term row per sample id. Long rows may only be written while
// the training loop is inside the final epoch of a mini-generation, which the
// loop signals through allow_long_writes.
class TeacherStore {
 public:
  TeacherStore(int n, int c);

  int n() const { return n_; }
  int c() const { return c_; }

  void allow_long_writes(bool allowed) { long_writes_allowed_ = allowed; }

  void record_short(const std::vector<int>& ids, const Tensor& logits);
  void record_long(const std::vector<int>& ids, const Tensor& logits);

  bool short_valid(int id) const;
  bool long_valid(int id) const;

  // Row gathers copy raw logits and do not consult validity; loss assembly
  // checks validity before reading.
  Tensor short_rows(const std::vector<int>& ids) const;
  Tensor long_rows(const std::vector<int>& ids) const;

  const std::vector<double>& short_data() const { return short_logits_; }
  const std::vector<double>& long_data() const { return long_logits_; }
  const std::vector<std::uint8_t>& short_flags() const { return short_valid_; }
  const std::vector<std::uint8_t>& long_flags() const { return long_valid_; }

 private:
  void check_batch(const std::vector<int>& ids, const Tensor& logits, const char* who) const;
  void write_rows(const std::vector<int>& ids, const Tensor& logits, std::vector<double>& dst,
                  std::vector<std::uint8_t>& valid);

  int n_ = 0;
  int c_ = 0;
  bool long_writes_allowed_ = false;
  std::vector<double> long_logits_;
  std::vector<double> short_logits_;
  std::vector<std::uint8_t> long_valid_;
  std::vector<std::uint8_t> short_valid_;
};

// Binary dump: ASCII "N C" line, then long validity flags (N bytes), short
// validity flags (N bytes), then the long and short logit matrices row-major
// as little-endian 64-bit reals.
void dump_teacher_store(const TeacherStore& store, const std::string& path);
TeacherStore load_teacher_store(const std::string& path);

// Unweighted components of one step's objective plus the weights applied.
struct LossBreakdown {
  double ce = 0.0;
  double kl_long = 0.0;
  double kl_short = 0.0;
  double total = 0.0;
  double lambda_long = 0.0;
  double lambda_short = 0.0;
};

// total = ce + (lambda_long * kl_long + lambda_short * kl_short), with this
// exact association so recomposition checks are bit-for-bit faithful.
double compose_total(double ce, double kl_long, double kl_short, double lambda_long,
                     double lambda_short);

struct AssembledLoss {
  Tensor total;          // scalar, tracked on the caller's tape
  LossBreakdown breakdown;
  Tensor long_rows;      // raw teacher rows read this step; empty when unused
  Tensor short_rows;
};

// Cross entropy plus the two temperature-softened teacher KL terms. In the
// first mini-generation the objective is cross entropy alone; a term whose
// weight is zero is skipped entirely and reported as zero. Teacher rows for
// every active term must be valid for all ids.
AssembledLoss assemble_loss(Tape& tape, const Tensor& student_logits,
                            const std::vector<int>& labels, const TeacherStore& store,
                            const std::vector<int>& ids, double lambda_long,
                            double lambda_short, double temperature, int mini_gen_index,
                            bool reverse_kl = false);

}  // namespace lstsd
