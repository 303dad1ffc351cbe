#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace lstsd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit reals. `node` ties the tensor to a Tape
// when it participates in a differentiation graph; -1 means untracked and the
// tensor behaves as a constant in every op.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data once populated
  int node = -1;
  std::uint32_t tape_id = 0;

  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor from(Shape s, std::vector<double> values);
  static Tensor scalar(double value);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool tracked() const { return node >= 0; }

  // Scalar tensors only.
  double value() const;

  double& at2(std::size_t i, std::size_t j);
  double at2(std::size_t i, std::size_t j) const;
};

// Copy of the values with no tape linkage and no grad.
Tensor detach(const Tensor& t);

bool all_finite(const Tensor& t);

class Tape;

// Gradients from one backward pass, keyed by the node ids of the tape that
// produced them. Tensors from other tapes are rejected.
class GradMap {
 public:
  bool has(const Tensor& t) const;
  const std::vector<double>& at(const Tensor& t) const;

 private:
  friend class Tape;
  std::vector<std::vector<double>> by_node_;
};

// Reverse-mode tape. Ops record themselves in creation order, which is a
// topological order of the graph, so backward() is a single reverse sweep
// with gradient accumulation at fan-out points. A tape is built per training
// step and discarded; backward may be called repeatedly and is idempotent.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a tracked copy of `t` on this tape.
  Tensor leaf(const Tensor& t);

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
  Tensor relu(const Tensor& x);
  Tensor maxpool2(const Tensor& x);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor sum(const Tensor& a);
  Tensor add_row_bias(const Tensor& x, const Tensor& bias);
  Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
  Tensor flatten(const Tensor& x);
  Tensor softmax_t(const Tensor& logits, double temperature);
  Tensor log_softmax_t(const Tensor& logits, double temperature);
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

  // KL between the temperature-softened student distribution and a constant
  // teacher distribution, averaged over rows. Teacher rows are clamped at
  // kTeacherEps and renormalized. `reverse` swaps the argument order of the
  // divergence; gradients flow only into the student logits either way.
  Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_probs,
                       double temperature, bool reverse = false);

  GradMap backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

  static constexpr double kTeacherEps = 1e-8;

 private:
  using BackFn = std::function<void(Tape&, const std::vector<double>&)>;

  struct Node {
    BackFn back;  // null for leaves
  };

  void check_input(const Tensor& t, const char* op) const;
  void attach(Tensor& out, BackFn fn);
  std::vector<double>& grad_buffer(int node, std::size_t size);

  std::uint32_t id_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Value-only row-wise softmax of logits / temperature, with max-subtraction.
Tensor softmax_t(const Tensor& logits, double temperature);
Tensor log_softmax_t(const Tensor& logits, double temperature);

}  // namespace lstsd
