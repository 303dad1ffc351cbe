#include "lstsd/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lstsd/rng.hpp"

namespace lstsd {

ModelArch ModelArch::mlp(std::vector<int> widths) {
  if (widths.size() < 2)
    throw std::invalid_argument("ModelArch::mlp: need input dim and class count, got " +
                                std::to_string(widths.size()) + " widths");
  for (int w : widths)
    if (w < 1)
      throw std::invalid_argument("ModelArch::mlp: widths must be positive, got " +
                                  std::to_string(w));
  ModelArch a;
  a.kind = Kind::mlp;
  a.num_classes = widths.back();
  a.widths = std::move(widths);
  return a;
}

ModelArch ModelArch::small_cnn(int in_channels, int in_h, int in_w, int num_classes) {
  if (in_channels < 1 || in_h < 4 || in_w < 4)
    throw std::invalid_argument("ModelArch::small_cnn: input must be >= 1x4x4, got " +
                                std::to_string(in_channels) + "x" + std::to_string(in_h) + "x" +
                                std::to_string(in_w));
  if (num_classes < 2)
    throw std::invalid_argument("ModelArch::small_cnn: need >= 2 classes, got " +
                                std::to_string(num_classes));
  ModelArch a;
  a.kind = Kind::small_cnn;
  a.in_channels = in_channels;
  a.in_h = in_h;
  a.in_w = in_w;
  a.num_classes = num_classes;
  return a;
}

std::string ModelArch::describe() const {
  std::ostringstream os;
  if (kind == Kind::mlp) {
    os << "mlp(";
    for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "-" : "") << widths[i];
    os << ")";
  } else {
    os << "small_cnn(" << in_channels << "x" << in_h << "x" << in_w << "->" << num_classes
       << ")";
  }
  return os.str();
}

void ModelParams::add(std::string name, Tensor t) {
  for (const auto& n : names_)
    if (n == name)
      throw std::invalid_argument("ModelParams::add: duplicate parameter name " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(t));
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

namespace {

constexpr int kConvChannels1 = 16;
constexpr int kConvChannels2 = 32;
constexpr int kKernel = 3;

// Flattened width after the two conv/pool blocks.
std::size_t cnn_flat_dim(const ModelArch& a) {
  const std::size_t h = static_cast<std::size_t>(a.in_h) / 2 / 2;
  const std::size_t w = static_cast<std::size_t>(a.in_w) / 2 / 2;
  return static_cast<std::size_t>(kConvChannels2) * h * w;
}

Tensor he_weight(Shape shape, std::size_t fan_in, std::uint64_t seed, std::uint64_t index) {
  Tensor t = Tensor::zeros(std::move(shape));
  RngStream rng(seed, RngStream::kInit, index);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.next_gaussian() * sd;
  return t;
}

}  // namespace

ModelParams init_params(const ModelArch& arch, std::uint64_t seed) {
  ModelParams p;
  std::uint64_t idx = 0;
  if (arch.kind == ModelArch::Kind::mlp) {
    for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l) {
      const std::size_t in = arch.widths[l], out = arch.widths[l + 1];
      p.add("fc" + std::to_string(l) + ".weight", he_weight({in, out}, in, seed, idx++));
      p.add("fc" + std::to_string(l) + ".bias", Tensor::zeros({out}));
      ++idx;
    }
    return p;
  }
  const std::size_t c = arch.in_channels;
  p.add("conv0.weight",
        he_weight({kConvChannels1, c, kKernel, kKernel}, c * kKernel * kKernel, seed, idx++));
  p.add("conv0.bias", Tensor::zeros({kConvChannels1}));
  ++idx;
  p.add("conv1.weight", he_weight({kConvChannels2, kConvChannels1, kKernel, kKernel},
                                  kConvChannels1 * kKernel * kKernel, seed, idx++));
  p.add("conv1.bias", Tensor::zeros({kConvChannels2}));
  ++idx;
  const std::size_t flat = cnn_flat_dim(arch);
  p.add("fc.weight", he_weight({flat, static_cast<std::size_t>(arch.num_classes)}, flat, seed,
                               idx++));
  p.add("fc.bias", Tensor::zeros({static_cast<std::size_t>(arch.num_classes)}));
  return p;
}

std::size_t param_count(const ModelArch& arch) {
  if (arch.kind == ModelArch::Kind::mlp) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l)
      n += static_cast<std::size_t>(arch.widths[l]) * arch.widths[l + 1] + arch.widths[l + 1];
    return n;
  }
  const std::size_t c = arch.in_channels;
  std::size_t n = kConvChannels1 * c * kKernel * kKernel + kConvChannels1;
  n += static_cast<std::size_t>(kConvChannels2) * kConvChannels1 * kKernel * kKernel +
       kConvChannels2;
  n += cnn_flat_dim(arch) * arch.num_classes + arch.num_classes;
  return n;
}

Tensor forward(Tape& tape, const ModelArch& arch, const std::vector<Tensor>& params,
               const Tensor& batch) {
  if (arch.kind == ModelArch::Kind::mlp) {
    const std::size_t layers = arch.widths.size() - 1;
    if (params.size() != 2 * layers)
      throw std::invalid_argument("forward: mlp expects " + std::to_string(2 * layers) +
                                  " parameter tensors, got " + std::to_string(params.size()));
    if (batch.rank() != 2 || batch.shape[1] != static_cast<std::size_t>(arch.widths[0]))
      throw std::invalid_argument("forward: mlp input must be [B, " +
                                  std::to_string(arch.widths[0]) + "], got " +
                                  shape_str(batch.shape));
    Tensor x = batch;
    for (std::size_t l = 0; l < layers; ++l) {
      x = tape.add_row_bias(tape.matmul(x, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < layers) x = tape.relu(x);
    }
    return x;
  }
  if (params.size() != 6)
    throw std::invalid_argument("forward: small_cnn expects 6 parameter tensors, got " +
                                std::to_string(params.size()));
  if (batch.rank() != 4 || batch.shape[1] != static_cast<std::size_t>(arch.in_channels) ||
      batch.shape[2] != static_cast<std::size_t>(arch.in_h) ||
      batch.shape[3] != static_cast<std::size_t>(arch.in_w))
    throw std::invalid_argument("forward: small_cnn input must be [B, " +
                                std::to_string(arch.in_channels) + ", " +
                                std::to_string(arch.in_h) + ", " + std::to_string(arch.in_w) +
                                "], got " + shape_str(batch.shape));
  Tensor x = tape.maxpool2(tape.relu(tape.add_channel_bias(
      tape.conv2d(batch, params[0], 1, 1), params[1])));
  x = tape.maxpool2(tape.relu(tape.add_channel_bias(tape.conv2d(x, params[2], 1, 1),
                                                    params[3])));
  return tape.add_row_bias(tape.matmul(tape.flatten(x), params[4]), params[5]);
}

Tensor forward(const ModelParams& params, const ModelArch& arch, const Tensor& batch) {
  Tape tape;  // nothing is tracked, so the tape stays empty
  return forward(tape, arch, params.tensors(), batch);
}

namespace {

void write_le_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint64_t read_le_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path + " for writing");
  for (std::size_t i = 0; i < params.count(); ++i) {
    os << params.name(i);
    for (std::size_t d : params.tensor(i).shape) os << ' ' << d;
    os << '\n';
  }
  os << '\n';
  for (std::size_t i = 0; i < params.count(); ++i)
    for (double v : params.tensor(i).data) write_le_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  ModelParams params;
  std::string line;
  std::vector<std::pair<std::string, Shape>> entries;
  while (std::getline(is, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    std::size_t d;
    while (ls >> d) shape.push_back(d);
    if (name.empty() || shape.empty())
      throw std::runtime_error("load_checkpoint: malformed header line '" + line + "' in " +
                               path);
    entries.emplace_back(std::move(name), std::move(shape));
  }
  if (entries.empty())
    throw std::runtime_error("load_checkpoint: no parameters in header of " + path);
  for (auto& [name, shape] : entries) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) {
      const std::uint64_t raw = read_le_u64(is);
      if (!is)
        throw std::runtime_error("load_checkpoint: payload of " + path +
                                 " ended early while reading " + name);
      v = std::bit_cast<double>(raw);
    }
    params.add(name, std::move(t));
  }
  is.peek();
  if (!is.eof())
    throw std::runtime_error("load_checkpoint: trailing bytes after payload in " + path);
  return params;
}

}  // namespace lstsd
