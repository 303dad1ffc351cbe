#include "lstsd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace lstsd {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

std::size_t sample_stride(const Tensor& features) {
  return features.shape[0] ? features.size() / features.shape[0] : 0;
}

}  // namespace

Tensor LabeledDataset::sample(std::size_t i) const {
  if (i >= size())
    throw std::out_of_range("LabeledDataset::sample: id " + std::to_string(i) +
                            " out of range [0, " + std::to_string(size()) + ")");
  Shape s(features.shape.begin() + 1, features.shape.end());
  const std::size_t stride = sample_stride(features);
  Tensor t = Tensor::zeros(std::move(s));
  std::copy_n(features.data.begin() + i * stride, stride, t.data.begin());
  return t;
}

Tensor LabeledDataset::gather(const std::vector<int>& ids) const {
  Shape s = features.shape;
  s[0] = ids.size();
  Tensor out = Tensor::zeros(std::move(s));
  const std::size_t stride = sample_stride(features);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= size())
      throw std::out_of_range("LabeledDataset::gather: id " + std::to_string(ids[r]) +
                              " out of range [0, " + std::to_string(size()) + ")");
    std::copy_n(features.data.begin() + static_cast<std::size_t>(ids[r]) * stride, stride,
                out.data.begin() + r * stride);
  }
  return out;
}

LabeledDataset gen_spiral(int n_per_class, int classes, double noise_std, std::uint64_t seed) {
  if (n_per_class < 1)
    throw std::invalid_argument("gen_spiral: n_per_class must be >= 1, got " +
                                std::to_string(n_per_class));
  if (classes < 2)
    throw std::invalid_argument("gen_spiral: classes must be >= 2, got " +
                                std::to_string(classes));
  if (noise_std < 0.0)
    throw std::invalid_argument("gen_spiral: noise_std must be >= 0, got " +
                                std::to_string(noise_std));
  const std::size_t n = static_cast<std::size_t>(n_per_class) * classes;
  LabeledDataset ds;
  ds.num_classes = classes;
  ds.features = Tensor::zeros({n, 2});
  ds.labels.resize(n);
  for (int k = 0; k < classes; ++k) {
    RngStream rng(seed, RngStream::kSpiral, static_cast<std::uint64_t>(k));
    for (int i = 0; i < n_per_class; ++i) {
      const double t = (i + 0.5) / n_per_class;
      const double r = t;
      const double theta = 2.0 * kPi * k / classes + kSpiralTwist * t;
      const std::size_t id = static_cast<std::size_t>(k) * n_per_class + i;
      double x = r * std::cos(theta);
      double y = r * std::sin(theta);
      if (noise_std > 0.0) {
        x += noise_std * rng.next_gaussian();
        y += noise_std * rng.next_gaussian();
      }
      ds.features.data[id * 2] = x;
      ds.features.data[id * 2 + 1] = y;
      ds.labels[id] = k;
    }
  }
  return ds;
}

namespace {

std::vector<unsigned char> read_all_bytes(const std::string& path, const char* who) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(std::string(who) + ": cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

LabeledDataset load_cifar_binary(const std::string& path, CifarVariant variant,
                                 const ChannelNorm& norm) {
  const std::vector<unsigned char> bytes = read_all_bytes(path, "load_cifar_binary");
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + 3 * 32 * 32;
  if (bytes.empty() || bytes.size() % record != 0)
    throw std::runtime_error("load_cifar_binary: " + path + " holds " +
                             std::to_string(bytes.size()) +
                             " bytes, not a multiple of the record size " +
                             std::to_string(record));
  const std::size_t n = bytes.size() / record;
  LabeledDataset ds;
  ds.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  ds.features = Tensor::zeros({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const int label = rec[label_bytes - 1];  // cifar100: second byte is the fine label
    if (label >= ds.num_classes)
      throw std::runtime_error("load_cifar_binary: record " + std::to_string(i) + " of " + path +
                               " has label " + std::to_string(label) + " >= " +
                               std::to_string(ds.num_classes));
    ds.labels[i] = label;
    const unsigned char* px = rec + label_bytes;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 32 * 32; ++p)
        ds.features.data[(i * 3 + c) * 32 * 32 + p] =
            (px[c * 32 * 32 + p] / 255.0 - norm.mean[c]) / norm.std[c];
  }
  return ds;
}

namespace {

std::uint32_t read_be_u32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

// IDX header: two zero bytes, dtype byte (0x08 = unsigned byte), rank byte,
// then rank big-endian u32 dims.
std::vector<std::size_t> parse_idx_header(const std::vector<unsigned char>& bytes,
                                          const std::string& path, std::size_t expect_rank) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0)
    throw std::runtime_error("load_idx: " + path + " lacks an IDX magic header");
  if (bytes[2] != 0x08)
    throw std::runtime_error("load_idx: " + path + " dtype byte is " + std::to_string(bytes[2]) +
                             ", only unsigned byte (0x08) is supported");
  const std::size_t rank = bytes[3];
  if (rank != expect_rank)
    throw std::runtime_error("load_idx: " + path + " has rank " + std::to_string(rank) +
                             ", expected " + std::to_string(expect_rank));
  if (bytes.size() < 4 + 4 * rank)
    throw std::runtime_error("load_idx: " + path + " truncated inside the dimension list");
  std::vector<std::size_t> dims(rank);
  for (std::size_t i = 0; i < rank; ++i) dims[i] = read_be_u32(bytes.data() + 4 + 4 * i);
  std::size_t payload = 1;
  for (std::size_t d : dims) payload *= d;
  if (bytes.size() != 4 + 4 * rank + payload)
    throw std::runtime_error("load_idx: " + path + " holds " + std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(4 + 4 * rank + payload));
  return dims;
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const ChannelNorm& norm) {
  const auto img_bytes = read_all_bytes(images_path, "load_idx");
  const auto lab_bytes = read_all_bytes(labels_path, "load_idx");
  const auto img_dims = parse_idx_header(img_bytes, images_path, 3);
  const auto lab_dims = parse_idx_header(lab_bytes, labels_path, 1);
  if (img_dims[0] != lab_dims[0])
    throw std::runtime_error("load_idx: " + std::to_string(img_dims[0]) + " images but " +
                             std::to_string(lab_dims[0]) + " labels");
  const std::size_t n = img_dims[0], h = img_dims[1], w = img_dims[2];
  LabeledDataset ds;
  ds.features = Tensor::zeros({n, 1, h, w});
  ds.labels.resize(n);
  const unsigned char* px = img_bytes.data() + 4 + 4 * 3;
  for (std::size_t i = 0; i < n * h * w; ++i)
    ds.features.data[i] = (px[i] / 255.0 - norm.mean[0]) / norm.std[0];
  const unsigned char* lb = lab_bytes.data() + 4 + 4;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  return ds;
}

void write_dataset_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_dataset_csv: cannot open " + path + " for writing");
  const std::size_t stride = sample_stride(ds.features);
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < stride; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", ds.features.data[i * stride + j]);
      os << buf << ',';
    }
    os << ds.labels[i] << '\n';
  }
  if (!os) throw std::runtime_error("write_dataset_csv: write failed for " + path);
}

EpochOrder shuffle_epoch(int n, std::uint64_t seed, int epoch) {
  if (n < 1)
    throw std::invalid_argument("shuffle_epoch: n must be >= 1, got " + std::to_string(n));
  if (epoch < 0)
    throw std::invalid_argument("shuffle_epoch: epoch must be >= 0, got " +
                                std::to_string(epoch));
  EpochOrder order;
  order.perm.resize(n);
  for (int i = 0; i < n; ++i) order.perm[i] = i;
  RngStream rng(seed, RngStream::kShuffle, static_cast<std::uint64_t>(epoch));
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order.perm[i], order.perm[j]);
  }
  return order;
}

std::vector<std::vector<int>> batches(const EpochOrder& order, int batch_size) {
  if (batch_size < 1)
    throw std::invalid_argument("batches: batch_size must be >= 1, got " +
                                std::to_string(batch_size));
  std::vector<std::vector<int>> out;
  for (std::size_t start = 0; start < order.perm.size(); start += batch_size) {
    const std::size_t end = std::min(order.perm.size(), start + batch_size);
    out.emplace_back(order.perm.begin() + start, order.perm.begin() + end);
  }
  return out;
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3)
    throw std::invalid_argument("hflip: expected a (C, H, W) image, got " +
                                shape_str(image.shape));
  const std::size_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
  Tensor out = Tensor::zeros(image.shape);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        out.data[(c * H + y) * W + x] = image.data[(c * H + y) * W + (W - 1 - x)];
  return out;
}

Tensor augment_pad_crop_flip(const Tensor& image, int pad, double flip_prob, RngStream& rng) {
  if (image.rank() != 3)
    throw std::invalid_argument("augment_pad_crop_flip: expected a (C, H, W) image, got " +
                                shape_str(image.shape));
  if (pad < 0)
    throw std::invalid_argument("augment_pad_crop_flip: pad must be >= 0, got " +
                                std::to_string(pad));
  if (flip_prob < 0.0 || flip_prob > 1.0)
    throw std::invalid_argument("augment_pad_crop_flip: flip_prob must be in [0, 1], got " +
                                std::to_string(flip_prob));
  const std::size_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
  Tensor out = image;
  if (pad > 0) {
    const std::size_t span = 2 * static_cast<std::size_t>(pad) + 1;
    const long dy = static_cast<long>(rng.next_below(span));
    const long dx = static_cast<long>(rng.next_below(span));
    out = Tensor::zeros(image.shape);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long sy = static_cast<long>(y) + dy - pad;
          const long sx = static_cast<long>(x) + dx - pad;
          if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
            continue;
          out.data[(c * H + y) * W + x] = image.data[(c * H + sy) * W + sx];
        }
  }
  if (flip_prob > 0.0 && rng.next_unit() < flip_prob) out = hflip(out);
  return out;
}

}  // namespace lstsd
