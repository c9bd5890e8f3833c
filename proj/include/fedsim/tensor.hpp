#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array of doubles. A default-constructed Tensor is the
// null tensor (no shape, no data); every other tensor has positive extents
// and exactly product(shape) elements.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0)) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }
  std::vector<double> release() && { return std::move(data_); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Same data viewed under a different shape with the same element count.
  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = &b.values()[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1. Cross-correlation: the kernel is
// not flipped.
// ---------------------------------------------------------------------------

struct Conv2dCache {
  Tensor input;
  Tensor kernels;

  bool valid() const noexcept { return !input.empty() && !kernels.empty(); }
};

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};

namespace detail {

inline void check_conv_shapes(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  require_rank(bias, 1, "conv2d bias");
  if (kernels.extent(2) != 3 || kernels.extent(3) != 3)
    throw ShapeError("conv2d: kernels must be 3x3, got " + shape_string(kernels.shape()));
  if (kernels.extent(1) != input.extent(0))
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernels.extent(1)) +
                     " input channels, input has " + std::to_string(input.extent(0)));
  if (bias.extent(0) != kernels.extent(0))
    throw ShapeError("conv2d: bias length " + std::to_string(bias.extent(0)) +
                     " does not match " + std::to_string(kernels.extent(0)) + " output channels");
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  detail::check_conv_shapes(input, kernels, bias);
  const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t cout = kernels.extent(0);
  Tensor out({cout, h, w});
  for (std::size_t o = 0; o < cout; ++o) {
    double* plane = &out[o * h * w];
    std::fill(plane, plane + h * w, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* in = &input.values()[c * h * w];
      const double* k = &kernels.values()[(o * cin + c) * 9];
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double kv = k[ky * 3 + kx];
          // output (y, x) reads input (y + ky - 1, x + kx - 1)
          const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* src = in + (y + ky - 1) * w + (kx - 1);
            double* dst = plane + y * w;
            for (std::size_t x = x0; x < x1; ++x) dst[x] += kv * src[x];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                     Conv2dCache& cache) {
  Tensor out = conv2d(input, kernels, bias);
  cache.input = input;
  cache.kernels = kernels;
  return out;
}

inline Conv2dGrads conv2d_backward(const Conv2dCache& cache, const Tensor& grad_output) {
  if (!cache.valid()) throw UsageError("conv2d_backward: no forward cache");
  const Tensor& input = cache.input;
  const Tensor& kernels = cache.kernels;
  const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t cout = kernels.extent(0);
  if (grad_output.shape() != Shape{cout, h, w})
    throw ShapeError("conv2d_backward: upstream gradient " + shape_string(grad_output.shape()) +
                     " does not match output " + shape_string({cout, h, w}));

  Conv2dGrads g{Tensor(input.shape()), Tensor(kernels.shape()), Tensor({cout})};
  for (std::size_t o = 0; o < cout; ++o) {
    const double* go = &grad_output.values()[o * h * w];
    double sum = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) sum += go[i];
    g.bias[o] = sum;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* in = &input.values()[c * h * w];
      double* gin = &g.input[c * h * w];
      const double* k = &kernels.values()[(o * cin + c) * 9];
      double* gk = &g.kernels[(o * cin + c) * 9];
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double kv = k[ky * 3 + kx];
          const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t src_row = (y + ky - 1) * w + (kx - 1);
            const double* gy = go + y * w;
            for (std::size_t x = x0; x < x1; ++x) {
              acc += gy[x] * in[src_row + x];
              gin[src_row + x] += gy[x] * kv;
            }
          }
          gk[ky * 3 + kx] += acc;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2
// ---------------------------------------------------------------------------

struct PoolMask {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

struct PoolResult {
  Tensor output;
  PoolMask mask;
};

inline PoolResult maxpool2(const Tensor& input) {
  detail::require_rank(input, 3, "maxpool2 input");
  const std::size_t c = input.extent(0), h = input.extent(1), w = input.extent(2);
  if (h % 2 || w % 2)
    throw ShapeError("maxpool2: spatial extents must be even, got " + shape_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult r{Tensor({c, oh, ow}), PoolMask{input.shape(), std::vector<std::size_t>(c * oh * ow)}};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = ch * h * w + 2 * y * w + 2 * x;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        // strict > keeps the first maximum in row-major order
        for (std::size_t i = 1; i < 4; ++i)
          if (input[cand[i]] > input[best]) best = cand[i];
        const std::size_t out = (ch * oh + y) * ow + x;
        r.output[out] = input[best];
        r.mask.argmax[out] = best;
      }
    }
  }
  return r;
}

inline Tensor maxpool2_backward(const PoolMask& mask, const Tensor& grad_output) {
  if (mask.input_shape.size() != 3) throw UsageError("maxpool2_backward: empty pool mask");
  if (grad_output.numel() != mask.argmax.size())
    throw ShapeError("maxpool2_backward: gradient " + shape_string(grad_output.shape()) +
                     " does not match pooled output size " + std::to_string(mask.argmax.size()));
  Tensor grad(mask.input_shape);
  for (std::size_t i = 0; i < mask.argmax.size(); ++i) grad[mask.argmax[i]] += grad_output[i];
  return grad;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

enum class Activation { relu, silu };

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor activate(const Tensor& x, Activation kind) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = kind == Activation::relu ? (v > 0 ? v : 0.0) : v * detail::sigmoid(v);
  }
  return Tensor(x.shape(), std::move(out));
}

// Gradient w.r.t. the activation input, given that input and the upstream
// gradient. relu'(0) is 0.
inline Tensor activate_backward(const Tensor& x, const Tensor& grad_output, Activation kind) {
  if (x.shape() != grad_output.shape())
    throw ShapeError("activation backward: input " + shape_string(x.shape()) + " vs gradient " +
                     shape_string(grad_output.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    double d;
    if (kind == Activation::relu) {
      d = v > 0 ? 1.0 : 0.0;
    } else {
      const double s = detail::sigmoid(v);
      d = s * (1.0 + v * (1.0 - s));
    }
    out[i] = d * grad_output[i];
  }
  return Tensor(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Row-wise log-softmax over a [batch x classes] tensor
// ---------------------------------------------------------------------------

inline Tensor log_softmax(const Tensor& logits) {
  detail::require_rank(logits, 2, "log_softmax");
  const std::size_t b = logits.extent(0), n = logits.extent(1);
  std::vector<double> out(logits.numel());
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = &logits.values()[i * n];
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = std::log(sum);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - mx - lse;
  }
  return Tensor(logits.shape(), std::move(out));
}

}  // namespace fedsim
