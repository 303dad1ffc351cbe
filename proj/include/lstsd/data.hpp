#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lstsd/rng.hpp"
#include "lstsd/tensor.hpp"

namespace lstsd {

// Samples are addressed by their stable index into `features`/`labels`;
// teacher bookkeeping keys on these ids, never on augmented content.
struct LabeledDataset {
  Tensor features;  // (N, D) or (N, C, H, W)
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Tensor sample(std::size_t i) const;
  Tensor gather(const std::vector<int>& ids) const;
};

// Spiral arm parametrization, exposed so tests can recompute the curve:
//   t     = (i + 0.5) / n_per_class          for point i of an arm
//   r     = t
//   theta = 2*pi*k / classes + kSpiralTwist*t  for class k
//   x = r*cos(theta) + noise, y = r*sin(theta) + noise
inline constexpr double kSpiralTwist = 4.0;

// Class-major order: ids [k*n_per_class, (k+1)*n_per_class) hold class k.
// Noise is Gaussian with the given std on both coordinates.
LabeledDataset gen_spiral(int n_per_class, int classes, double noise_std, std::uint64_t seed);

enum class CifarVariant { cifar10, cifar100 };

struct ChannelNorm {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

// Binary batch format: per record one label byte (cifar10) or a coarse+fine
// pair (cifar100, fine is used), then 3072 channel-major pixel bytes.
// Pixels are scaled to [0, 1] and then normalized per channel.
LabeledDataset load_cifar_binary(const std::string& path, CifarVariant variant,
                                 const ChannelNorm& norm = {});

// IDX pair (images + labels), unsigned-byte payloads. Images become
// (N, 1, H, W) scaled to [0, 1]; class count is max label + 1.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const ChannelNorm& norm = {});

void write_dataset_csv(const LabeledDataset& ds, const std::string& path);

struct EpochOrder {
  std::vector<int> perm;
};

// Fisher-Yates permutation of [0, n) on the stream keyed (seed, epoch).
EpochOrder shuffle_epoch(int n, std::uint64_t seed, int epoch);

// Consecutive slices of the permutation; a final partial batch is kept.
std::vector<std::vector<int>> batches(const EpochOrder& order, int batch_size);

// Symmetric zero-pad, random crop back to the original size, then horizontal
// flip with probability flip_prob. pad == 0 and flip_prob == 0 draw nothing
// and return the image unchanged. Draw order: crop dy, crop dx, flip.
Tensor augment_pad_crop_flip(const Tensor& image, int pad, double flip_prob, RngStream& rng);

// Horizontal mirror of a (C, H, W) image; an involution.
Tensor hflip(const Tensor& image);

}  // namespace lstsd
