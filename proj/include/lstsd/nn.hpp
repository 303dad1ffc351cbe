#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lstsd/tensor.hpp"

namespace lstsd {

// Architecture description. Two fixed families, enough for desk-scale runs:
// fully connected ReLU stacks and a small two-block convnet.
struct ModelArch {
  enum class Kind { mlp, small_cnn };

  Kind kind = Kind::mlp;
  std::vector<int> widths;  // mlp: input dim, hidden..., classes
  int in_channels = 0;      // small_cnn input planes
  int in_h = 0;
  int in_w = 0;
  int num_classes = 0;

  // widths must list input dim, hidden widths and the class count.
  static ModelArch mlp(std::vector<int> widths);

  // conv(in->16, 3x3, pad 1) - relu - maxpool2 -
  // conv(16->32, 3x3, pad 1) - relu - maxpool2 - flatten - dense(classes).
  static ModelArch small_cnn(int in_channels, int in_h, int in_w, int num_classes);

  std::string describe() const;
};

// Named parameter tensors in a fixed order. Names are unique.
class ModelParams {
 public:
  void add(std::string name, Tensor t);
  std::size_t count() const { return tensors_.size(); }
  std::size_t scalar_count() const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// He-initialized parameters: weights ~ N(0, 2 / fan_in), biases zero.
// Bit-identical for identical (arch, seed).
ModelParams init_params(const ModelArch& arch, std::uint64_t seed);

std::size_t param_count(const ModelArch& arch);

// Forward pass on a tape; `params` are the model tensors in ModelParams
// order, tracked or not. Batch is (B, D) for mlp, (B, C, H, W) for small_cnn.
Tensor forward(Tape& tape, const ModelArch& arch, const std::vector<Tensor>& params,
               const Tensor& batch);

// Value-only convenience wrapper.
Tensor forward(const ModelParams& params, const ModelArch& arch, const Tensor& batch);

// Checkpoint layout: one "name shape0 shape1 ..." line per parameter, a blank
// line, then every tensor's values as little-endian 64-bit reals in order.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace lstsd
