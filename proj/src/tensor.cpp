#include "lstsd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace lstsd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape s) {
  Tensor t;
  t.shape = std::move(s);
  t.data.assign(numel(t.shape), 0.0);
  return t;
}

Tensor Tensor::full(Shape s, double value) {
  Tensor t = zeros(std::move(s));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
  if (numel(s) != values.size())
    throw std::invalid_argument("Tensor::from: shape " + shape_str(s) + " expects " +
                                std::to_string(numel(s)) + " values, got " +
                                std::to_string(values.size()));
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::value() const {
  if (size() != 1)
    throw std::invalid_argument("Tensor::value: tensor " + shape_str(shape) + " is not scalar");
  return data[0];
}

double& Tensor::at2(std::size_t i, std::size_t j) {
  return data[i * shape[1] + j];
}

double Tensor::at2(std::size_t i, std::size_t j) const {
  return data[i * shape[1] + j];
}

Tensor detach(const Tensor& t) {
  Tensor r;
  r.shape = t.shape;
  r.data = t.data;
  return r;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

bool GradMap::has(const Tensor& t) const {
  return t.node >= 0 && static_cast<std::size_t>(t.node) < by_node_.size() &&
         !by_node_[t.node].empty();
}

const std::vector<double>& GradMap::at(const Tensor& t) const {
  if (!t.tracked())
    throw std::invalid_argument("GradMap::at: tensor is not tracked on any tape");
  if (!has(t))
    throw std::invalid_argument("GradMap::at: no gradient recorded for node " +
                                std::to_string(t.node));
  return by_node_[t.node];
}

namespace {

std::atomic<std::uint32_t> g_next_tape_id{1};

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank-" + std::to_string(rank) +
                                " tensor, got shape " + shape_str(t.shape));
}

void require_positive_temperature(double t, const char* op) {
  if (!(t > 0.0))
    throw std::invalid_argument(std::string(op) + ": temperature must be positive, got " +
                                std::to_string(t));
}

// Row-wise softmax of logits / temperature. Max is subtracted after the
// temperature division so arbitrarily large logits stay finite.
void softmax_rows(const double* logits, std::size_t rows, std::size_t cols, double temperature,
                  double* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = logits + i * cols;
    double* p = out + i * cols;
    double mx = z[0] / temperature;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, z[c] / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(z[c] / temperature - mx);
      sum += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= sum;
  }
}

// Row-wise log-softmax: shifted logits minus log-sum-exp of the shifted row.
void log_softmax_rows(const double* logits, std::size_t rows, std::size_t cols,
                      double temperature, double* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = logits + i * cols;
    double* lp = out + i * cols;
    double mx = z[0] / temperature;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, z[c] / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      lp[c] = z[c] / temperature - mx;
      sum += std::exp(lp[c]);
    }
    const double lse = std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) lp[c] -= lse;
  }
}

}  // namespace

Tensor softmax_t(const Tensor& logits, double temperature) {
  require_rank(logits, 2, "softmax_t");
  require_positive_temperature(temperature, "softmax_t");
  Tensor out = Tensor::zeros(logits.shape);
  softmax_rows(logits.data.data(), logits.shape[0], logits.shape[1], temperature,
               out.data.data());
  return out;
}

Tensor log_softmax_t(const Tensor& logits, double temperature) {
  require_rank(logits, 2, "log_softmax_t");
  require_positive_temperature(temperature, "log_softmax_t");
  Tensor out = Tensor::zeros(logits.shape);
  log_softmax_rows(logits.data.data(), logits.shape[0], logits.shape[1], temperature,
                   out.data.data());
  return out;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

void Tape::check_input(const Tensor& t, const char* op) const {
  if (t.tracked() && t.tape_id != id_)
    throw std::invalid_argument(std::string(op) + ": input tensor belongs to a different tape");
}

void Tape::attach(Tensor& out, BackFn fn) {
  nodes_.push_back(Node{std::move(fn)});
  out.node = static_cast<int>(nodes_.size()) - 1;
  out.tape_id = id_;
}

std::vector<double>& Tape::grad_buffer(int node, std::size_t size) {
  auto& g = grads_[node];
  if (g.empty()) g.assign(size, 0.0);
  return g;
}

Tensor Tape::leaf(const Tensor& t) {
  Tensor out = detach(t);
  attach(out, nullptr);
  return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check_input(a, "matmul");
  check_input(b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a.data[i * k + l];
      for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += av * b.data[l * n + j];
    }
  if (!a.tracked() && !b.tracked()) return out;
  const int an = a.node, bn = b.node;
  std::vector<double> adata = bn >= 0 ? a.data : std::vector<double>{};
  std::vector<double> bdata = an >= 0 ? b.data : std::vector<double>{};
  attach(out, [an, bn, m, k, n, adata = std::move(adata),
               bdata = std::move(bdata)](Tape& t, const std::vector<double>& g) {
    if (an >= 0) {
      auto& da = t.grad_buffer(an, m * k);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bdata[l * n + j];
          da[i * k + l] += acc;
        }
    }
    if (bn >= 0) {
      auto& db = t.grad_buffer(bn, k * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double av = adata[i * k + l];
          for (std::size_t j = 0; j < n; ++j) db[l * n + j] += av * g[i * n + j];
        }
    }
  });
  return out;
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  check_input(x, "conv2d");
  check_input(w, "conv2d");
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (stride < 1)
    throw std::invalid_argument("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0)
    throw std::invalid_argument("conv2d: pad must be >= 0, got " + std::to_string(pad));
  if (x.shape[1] != w.shape[1])
    throw std::invalid_argument("conv2d: input channels disagree: x " + shape_str(x.shape) +
                                " vs w " + shape_str(w.shape));
  const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3];
  if (KH > H + 2 * static_cast<std::size_t>(pad) || KW > W + 2 * static_cast<std::size_t>(pad))
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape) +
                                " exceeds padded input " + shape_str(x.shape) + " with pad " +
                                std::to_string(pad));
  const std::size_t HO = (H + 2 * pad - KH) / stride + 1;
  const std::size_t WO = (W + 2 * pad - KW) / stride + 1;
  Tensor out = Tensor::zeros({B, F, HO, WO});
  auto xat = [&](std::size_t b, std::size_t c, std::size_t y, std::size_t xx) {
    return x.data[((b * C + c) * H + y) * W + xx];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < HO; ++i)
        for (std::size_t j = 0; j < WO; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long y = static_cast<long>(i) * stride - pad + static_cast<long>(u);
                const long xx = static_cast<long>(j) * stride - pad + static_cast<long>(v);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W))
                  continue;
                acc += xat(b, c, y, xx) * w.data[((f * C + c) * KH + u) * KW + v];
              }
          out.data[((b * F + f) * HO + i) * WO + j] = acc;
        }
  if (!x.tracked() && !w.tracked()) return out;
  const int xn = x.node, wn = w.node;
  std::vector<double> xdata = wn >= 0 ? x.data : std::vector<double>{};
  std::vector<double> wdata = xn >= 0 ? w.data : std::vector<double>{};
  attach(out, [xn, wn, B, C, H, W, F, KH, KW, HO, WO, stride, pad, xdata = std::move(xdata),
               wdata = std::move(wdata)](Tape& t, const std::vector<double>& g) {
    std::vector<double>* dx = xn >= 0 ? &t.grad_buffer(xn, B * C * H * W) : nullptr;
    std::vector<double>* dw = wn >= 0 ? &t.grad_buffer(wn, F * C * KH * KW) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < HO; ++i)
          for (std::size_t j = 0; j < WO; ++j) {
            const double go = g[((b * F + f) * HO + i) * WO + j];
            if (go == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t u = 0; u < KH; ++u)
                for (std::size_t v = 0; v < KW; ++v) {
                  const long y = static_cast<long>(i) * stride - pad + static_cast<long>(u);
                  const long xx = static_cast<long>(j) * stride - pad + static_cast<long>(v);
                  if (y < 0 || xx < 0 || y >= static_cast<long>(H) ||
                      xx >= static_cast<long>(W))
                    continue;
                  const std::size_t xi = ((b * C + c) * H + y) * W + xx;
                  const std::size_t wi = ((f * C + c) * KH + u) * KW + v;
                  if (dx) (*dx)[xi] += go * wdata[wi];
                  if (dw) (*dw)[wi] += go * xdata[xi];
                }
          }
  });
  return out;
}

Tensor Tape::relu(const Tensor& x) {
  check_input(x, "relu");
  Tensor out = detach(x);
  std::vector<std::uint8_t> mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = x.data[i] > 0.0;  // subgradient at 0 is 0
    if (!mask[i]) out.data[i] = 0.0;
  }
  if (!x.tracked()) return out;
  const int xn = x.node;
  const std::size_t n = x.size();
  attach(out, [xn, n, mask = std::move(mask)](Tape& t, const std::vector<double>& g) {
    auto& dx = t.grad_buffer(xn, n);
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) dx[i] += g[i];
  });
  return out;
}

Tensor Tape::maxpool2(const Tensor& x) {
  check_input(x, "maxpool2");
  require_rank(x, 4, "maxpool2");
  const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (H < 2 || W < 2)
    throw std::invalid_argument("maxpool2: spatial dims must be >= 2, got " +
                                shape_str(x.shape));
  const std::size_t HO = H / 2, WO = W / 2;
  Tensor out = Tensor::zeros({B, C, HO, WO});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HO; ++i)
        for (std::size_t j = 0; j < WO; ++j) {
          std::size_t best = ((b * C + c) * H + 2 * i) * W + 2 * j;
          double bv = x.data[best];
          for (std::size_t u = 0; u < 2; ++u)
            for (std::size_t v = 0; v < 2; ++v) {
              const std::size_t idx = ((b * C + c) * H + 2 * i + u) * W + 2 * j + v;
              if (x.data[idx] > bv) {  // ties keep the first position in scan order
                bv = x.data[idx];
                best = idx;
              }
            }
          const std::size_t o = ((b * C + c) * HO + i) * WO + j;
          out.data[o] = bv;
          arg[o] = best;
        }
  if (!x.tracked()) return out;
  const int xn = x.node;
  const std::size_t n = x.size();
  attach(out, [xn, n, arg = std::move(arg)](Tape& t, const std::vector<double>& g) {
    auto& dx = t.grad_buffer(xn, n);
    for (std::size_t o = 0; o < g.size(); ++o) dx[arg[o]] += g[o];
  });
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_input(a, "add");
  check_input(b, "add");
  if (a.shape != b.shape)
    throw std::invalid_argument("add: shapes disagree: " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tensor out = detach(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
  if (!a.tracked() && !b.tracked()) return out;
  const int an = a.node, bn = b.node;
  const std::size_t n = a.size();
  attach(out, [an, bn, n](Tape& t, const std::vector<double>& g) {
    if (an >= 0) {
      auto& da = t.grad_buffer(an, n);
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (bn >= 0) {
      auto& db = t.grad_buffer(bn, n);
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
    }
  });
  return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
  check_input(a, "scale");
  Tensor out = detach(a);
  for (double& v : out.data) v *= c;
  if (!a.tracked()) return out;
  const int an = a.node;
  const std::size_t n = a.size();
  attach(out, [an, n, c](Tape& t, const std::vector<double>& g) {
    auto& da = t.grad_buffer(an, n);
    for (std::size_t i = 0; i < n; ++i) da[i] += c * g[i];
  });
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  check_input(a, "sum");
  double acc = 0.0;
  for (double v : a.data) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (!a.tracked()) return out;
  const int an = a.node;
  const std::size_t n = a.size();
  attach(out, [an, n](Tape& t, const std::vector<double>& g) {
    auto& da = t.grad_buffer(an, n);
    for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
  });
  return out;
}

Tensor Tape::add_row_bias(const Tensor& x, const Tensor& bias) {
  check_input(x, "add_row_bias");
  check_input(bias, "add_row_bias");
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  if (x.shape[1] != bias.shape[0])
    throw std::invalid_argument("add_row_bias: width mismatch: " + shape_str(x.shape) + " vs " +
                                shape_str(bias.shape));
  const std::size_t R = x.shape[0], C = x.shape[1];
  Tensor out = detach(x);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t c = 0; c < C; ++c) out.data[i * C + c] += bias.data[c];
  if (!x.tracked() && !bias.tracked()) return out;
  const int xn = x.node, bn = bias.node;
  attach(out, [xn, bn, R, C](Tape& t, const std::vector<double>& g) {
    if (xn >= 0) {
      auto& dx = t.grad_buffer(xn, R * C);
      for (std::size_t i = 0; i < R * C; ++i) dx[i] += g[i];
    }
    if (bn >= 0) {
      auto& db = t.grad_buffer(bn, C);
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t c = 0; c < C; ++c) db[c] += g[i * C + c];
    }
  });
  return out;
}

Tensor Tape::add_channel_bias(const Tensor& x, const Tensor& bias) {
  check_input(x, "add_channel_bias");
  check_input(bias, "add_channel_bias");
  require_rank(x, 4, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  if (x.shape[1] != bias.shape[0])
    throw std::invalid_argument("add_channel_bias: channel mismatch: " + shape_str(x.shape) +
                                " vs " + shape_str(bias.shape));
  const std::size_t B = x.shape[0], F = x.shape[1], HW = x.shape[2] * x.shape[3];
  Tensor out = detach(x);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t p = 0; p < HW; ++p) out.data[(b * F + f) * HW + p] += bias.data[f];
  if (!x.tracked() && !bias.tracked()) return out;
  const int xn = x.node, bn = bias.node;
  attach(out, [xn, bn, B, F, HW](Tape& t, const std::vector<double>& g) {
    if (xn >= 0) {
      auto& dx = t.grad_buffer(xn, B * F * HW);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (bn >= 0) {
      auto& db = t.grad_buffer(bn, F);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t p = 0; p < HW; ++p) db[f] += g[(b * F + f) * HW + p];
    }
  });
  return out;
}

Tensor Tape::flatten(const Tensor& x) {
  check_input(x, "flatten");
  if (x.rank() < 2)
    throw std::invalid_argument("flatten: expected rank >= 2, got shape " + shape_str(x.shape));
  Tensor out;
  out.shape = {x.shape[0], x.size() / x.shape[0]};
  out.data = x.data;
  if (!x.tracked()) return out;
  const int xn = x.node;
  const std::size_t n = x.size();
  attach(out, [xn, n](Tape& t, const std::vector<double>& g) {
    auto& dx = t.grad_buffer(xn, n);
    for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
  });
  return out;
}

Tensor Tape::softmax_t(const Tensor& logits, double temperature) {
  check_input(logits, "softmax_t");
  Tensor out = lstsd::softmax_t(logits, temperature);
  if (!logits.tracked()) return out;
  const int zn = logits.node;
  const std::size_t R = logits.shape[0], C = logits.shape[1];
  std::vector<double> p = out.data;
  attach(out, [zn, R, C, temperature, p = std::move(p)](Tape& t, const std::vector<double>& g) {
    auto& dz = t.grad_buffer(zn, R * C);
    for (std::size_t i = 0; i < R; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[i * C + c] * p[i * C + c];
      for (std::size_t c = 0; c < C; ++c)
        dz[i * C + c] += p[i * C + c] * (g[i * C + c] - dot) / temperature;
    }
  });
  return out;
}

Tensor Tape::log_softmax_t(const Tensor& logits, double temperature) {
  check_input(logits, "log_softmax_t");
  Tensor out = lstsd::log_softmax_t(logits, temperature);
  if (!logits.tracked()) return out;
  const int zn = logits.node;
  const std::size_t R = logits.shape[0], C = logits.shape[1];
  std::vector<double> p(out.data.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(out.data[i]);
  attach(out, [zn, R, C, temperature, p = std::move(p)](Tape& t, const std::vector<double>& g) {
    auto& dz = t.grad_buffer(zn, R * C);
    for (std::size_t i = 0; i < R; ++i) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < C; ++c) gsum += g[i * C + c];
      for (std::size_t c = 0; c < C; ++c)
        dz[i * C + c] += (g[i * C + c] - p[i * C + c] * gsum) / temperature;
    }
  });
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_input(logits, "cross_entropy");
  require_rank(logits, 2, "cross_entropy");
  const std::size_t R = logits.shape[0], C = logits.shape[1];
  if (labels.size() != R)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(R) + " logit rows");
  for (std::size_t i = 0; i < R; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) +
                              " out of range [0, " + std::to_string(C) + ") for sample " +
                              std::to_string(i));
  std::vector<double> lp(R * C);
  log_softmax_rows(logits.data.data(), R, C, 1.0, lp.data());
  double acc = 0.0;
  for (std::size_t i = 0; i < R; ++i) acc -= lp[i * C + labels[i]];
  Tensor out = Tensor::scalar(acc / static_cast<double>(R));
  if (!logits.tracked()) return out;
  const int zn = logits.node;
  std::vector<double> p(R * C);
  for (std::size_t i = 0; i < R * C; ++i) p[i] = std::exp(lp[i]);
  attach(out, [zn, R, C, labels, p = std::move(p)](Tape& t, const std::vector<double>& g) {
    auto& dz = t.grad_buffer(zn, R * C);
    const double inv = g[0] / static_cast<double>(R);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double y = static_cast<std::size_t>(labels[i]) == c ? 1.0 : 0.0;
        dz[i * C + c] += inv * (p[i * C + c] - y);
      }
  });
  return out;
}

Tensor Tape::kl_divergence(const Tensor& student_logits, const Tensor& teacher_probs,
                           double temperature, bool reverse) {
  check_input(student_logits, "kl_divergence");
  require_rank(student_logits, 2, "kl_divergence");
  require_rank(teacher_probs, 2, "kl_divergence");
  require_positive_temperature(temperature, "kl_divergence");
  if (student_logits.shape != teacher_probs.shape)
    throw std::invalid_argument("kl_divergence: shapes disagree: " +
                                shape_str(student_logits.shape) + " vs " +
                                shape_str(teacher_probs.shape));
  const std::size_t R = student_logits.shape[0], C = student_logits.shape[1];
  for (std::size_t i = 0; i < R; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double q = teacher_probs.data[i * C + c];
      if (q < 0.0)
        throw std::invalid_argument("kl_divergence: negative teacher probability " +
                                    std::to_string(q) + " in row " + std::to_string(i));
      sum += q;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("kl_divergence: teacher row " + std::to_string(i) +
                                  " sums to " + std::to_string(sum) + ", expected 1 within 1e-6");
  }

  std::vector<double> lp(R * C), p(R * C), lq(R * C), q(R * C);
  log_softmax_rows(student_logits.data.data(), R, C, temperature, lp.data());
  for (std::size_t i = 0; i < R * C; ++i) p[i] = std::exp(lp[i]);
  for (std::size_t i = 0; i < R; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      q[i * C + c] = std::max(teacher_probs.data[i * C + c], Tape::kTeacherEps);
      sum += q[i * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) {
      q[i * C + c] /= sum;
      lq[i * C + c] = std::log(q[i * C + c]);
    }
  }

  std::vector<double> row_kl(R, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < R; ++i) {
    double kl = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = i * C + c;
      if (reverse)
        kl += q[k] * (lq[k] - lp[k]);
      else if (p[k] > 0.0)
        kl += p[k] * (lp[k] - lq[k]);
    }
    row_kl[i] = kl;
    acc += kl;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(R));
  if (!student_logits.tracked()) return out;
  const int zn = student_logits.node;
  attach(out, [zn, R, C, temperature, reverse, p = std::move(p), lp = std::move(lp),
               lq = std::move(lq), q = std::move(q),
               row_kl = std::move(row_kl)](Tape& t, const std::vector<double>& g) {
    auto& dz = t.grad_buffer(zn, R * C);
    const double inv = g[0] / (temperature * static_cast<double>(R));
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = i * C + c;
        if (reverse)
          dz[k] += inv * (p[k] - q[k]);
        else
          dz[k] += inv * p[k] * ((lp[k] - lq[k]) - row_kl[i]);
      }
  });
  return out;
}

GradMap Tape::backward(const Tensor& loss) {
  if (!loss.tracked())
    throw std::invalid_argument("backward: loss tensor is not tracked on a tape");
  if (loss.tape_id != id_)
    throw std::invalid_argument("backward: loss tensor belongs to a different tape");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape));
  grads_.assign(nodes_.size(), {});
  grads_[loss.node] = {1.0};
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[i].empty()) continue;  // node not reachable from the loss
    if (nodes_[i].back) nodes_[i].back(*this, grads_[i]);
  }
  GradMap gm;
  gm.by_node_ = std::move(grads_);
  grads_.clear();
  return gm;
}

}  // namespace lstsd
