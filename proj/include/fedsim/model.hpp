#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

struct Conv3x3 {
  std::size_t out_channels;
};
struct MaxPool2 {};
struct Act {
  Activation kind;
};
struct Flatten {};
struct Dense {
  std::size_t units;
};

using Layer = std::variant<Conv3x3, MaxPool2, Act, Flatten, Dense>;

// Per-example input shape is {C, H, W} for image models or {features} for
// plain vectors. Batches prepend a leading batch extent.
struct ModelSpec {
  Shape input_shape;
  std::vector<Layer> layers;
  std::size_t num_classes = 0;
};

inline bool layer_has_params(const Layer& layer) {
  return std::holds_alternative<Conv3x3>(layer) || std::holds_alternative<Dense>(layer);
}

// Per-example shape entering each layer plus the final output shape
// (layers.size() + 1 entries). Throws SpecError if the layers do not compose.
inline std::vector<Shape> infer_shapes(const ModelSpec& spec) {
  if (spec.input_shape.empty() || spec.input_shape.size() == 2 || spec.input_shape.size() > 3)
    throw SpecError("input shape must be {C,H,W} or {features}, got " +
                    shape_string(spec.input_shape));
  for (auto e : spec.input_shape)
    if (e == 0) throw SpecError("input shape has a zero extent");
  if (spec.num_classes == 0) throw SpecError("class count must be positive");

  std::vector<Shape> shapes{spec.input_shape};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Shape& in = shapes.back();
    const std::string where = "layer " + std::to_string(i) + ": ";
    Shape out = std::visit(
        [&](const auto& layer) -> Shape {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, Conv3x3>) {
            if (in.size() != 3) throw SpecError(where + "conv3x3 needs a {C,H,W} input, got " + shape_string(in));
            if (layer.out_channels == 0) throw SpecError(where + "conv3x3 with zero channels");
            return {layer.out_channels, in[1], in[2]};
          } else if constexpr (std::is_same_v<L, MaxPool2>) {
            if (in.size() != 3) throw SpecError(where + "maxpool2 needs a {C,H,W} input, got " + shape_string(in));
            if (in[1] % 2 || in[2] % 2)
              throw SpecError(where + "maxpool2 needs even spatial extents, got " + shape_string(in));
            return {in[0], in[1] / 2, in[2] / 2};
          } else if constexpr (std::is_same_v<L, Act>) {
            return in;
          } else if constexpr (std::is_same_v<L, Flatten>) {
            return {shape_numel(in)};
          } else {
            if (in.size() != 1) throw SpecError(where + "dense needs a flat input, got " + shape_string(in));
            if (layer.units == 0) throw SpecError(where + "dense with zero units");
            return {layer.units};
          }
        },
        spec.layers[i]);
    shapes.push_back(std::move(out));
  }
  if (shapes.back() != Shape{spec.num_classes})
    throw SpecError("model emits " + shape_string(shapes.back()) + " but " +
                    std::to_string(spec.num_classes) + " logits are required");
  return shapes;
}

// flatten -> dense(hidden) -> relu -> dense(classes)
inline ModelSpec mlp_spec(Shape input_shape, std::size_t classes, std::size_t hidden = 64) {
  ModelSpec spec{std::move(input_shape), {}, classes};
  if (spec.input_shape.size() != 1) spec.layers.emplace_back(Flatten{});
  spec.layers.emplace_back(Dense{hidden});
  spec.layers.emplace_back(Act{Activation::relu});
  spec.layers.emplace_back(Dense{classes});
  return spec;
}

// conv3x3(8)-relu-pool-conv3x3(16)-relu-pool-flatten-dense(classes)
inline ModelSpec small_cnn_spec(Shape input_shape, std::size_t classes) {
  return ModelSpec{std::move(input_shape),
                   {Conv3x3{8}, Act{Activation::relu}, MaxPool2{}, Conv3x3{16},
                    Act{Activation::relu}, MaxPool2{}, Flatten{}, Dense{classes}},
                   classes};
}

// ---------------------------------------------------------------------------
// Flat parameter vector and its layout
// ---------------------------------------------------------------------------

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  Shape shape;

  std::size_t size() const { return shape_numel(shape); }
  friend bool operator==(const ParamSlice&, const ParamSlice&) = default;
};

using ParamLayout = std::vector<ParamSlice>;

inline std::size_t layout_size(const ParamLayout& layout) {
  return layout.empty() ? 0 : layout.back().offset + layout.back().size();
}

// Weight then bias for every conv/dense layer, in layer order, packed without
// gaps. Names are "layer<i>.weight" / "layer<i>.bias".
inline ParamLayout make_layout(const ModelSpec& spec) {
  const auto shapes = infer_shapes(spec);
  ParamLayout layout;
  std::size_t offset = 0;
  auto push = [&](std::string name, Shape shape) {
    ParamSlice s{std::move(name), offset, std::move(shape)};
    offset += s.size();
    layout.push_back(std::move(s));
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    const Shape& in = shapes[i];
    if (auto* conv = std::get_if<Conv3x3>(&spec.layers[i])) {
      push(prefix + ".weight", {conv->out_channels, in[0], 3, 3});
      push(prefix + ".bias", {conv->out_channels});
    } else if (auto* dense = std::get_if<Dense>(&spec.layers[i])) {
      push(prefix + ".weight", {dense->units, in[0]});
      push(prefix + ".bias", {dense->units});
    }
  }
  return layout;
}

struct ModelParams {
  std::vector<double> values;
  ParamLayout layout;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline void check_layout(const ParamLayout& expected, const ParamLayout& actual) {
  if (expected != actual) throw LayoutError("parameter layouts differ");
}

inline void check_params(const ModelParams& params) {
  if (layout_size(params.layout) != params.values.size())
    throw LayoutError("layout covers " + std::to_string(layout_size(params.layout)) +
                      " values but vector holds " + std::to_string(params.values.size()));
  std::size_t expected_offset = 0;
  for (const auto& s : params.layout) {
    if (s.offset != expected_offset) throw LayoutError("layout slice '" + s.name + "' is not contiguous");
    expected_offset += s.size();
  }
}

inline ModelParams zero_params(const ModelSpec& spec) {
  ModelParams p{{}, make_layout(spec)};
  p.values.assign(layout_size(p.layout), 0.0);
  return p;
}

// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
inline ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams p = zero_params(spec);
  Rng rng(seed);
  for (const auto& slice : p.layout) {
    if (slice.shape.size() < 2) continue;  // bias
    const std::size_t fan_in = slice.size() / slice.shape[0];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::size_t i = 0; i < slice.size(); ++i) p.values[slice.offset + i] = dist(rng);
  }
  return p;
}

// Per-slice tensors, in layout order.
inline std::vector<Tensor> unflatten(const ModelParams& params) {
  check_params(params);
  std::vector<Tensor> out;
  out.reserve(params.layout.size());
  for (const auto& s : params.layout) {
    auto first = params.values.begin() + static_cast<std::ptrdiff_t>(s.offset);
    out.emplace_back(s.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.size())));
  }
  return out;
}

inline ModelParams flatten(const ParamLayout& layout, const std::vector<Tensor>& tensors) {
  if (tensors.size() != layout.size())
    throw LayoutError("expected " + std::to_string(layout.size()) + " tensors, got " +
                      std::to_string(tensors.size()));
  ModelParams p{std::vector<double>(layout_size(layout)), layout};
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (tensors[i].shape() != layout[i].shape)
      throw LayoutError("slice '" + layout[i].name + "' expects " + shape_string(layout[i].shape) +
                        ", got " + shape_string(tensors[i].shape()));
    std::copy(tensors[i].values().begin(), tensors[i].values().end(),
              p.values.begin() + static_cast<std::ptrdiff_t>(layout[i].offset));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fingerprint(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = (h ^ bits) * 0x100000001b3ULL;
  }
  return h;
}

inline Tensor example_slice(const Tensor& batch, std::size_t i, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  auto first = batch.values().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor(shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

inline Shape batched(std::size_t b, const Shape& shape) {
  Shape out{b};
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

inline Tensor slice_tensor(const ModelParams& params, std::size_t slice) {
  const auto& s = params.layout[slice];
  auto first = params.values.begin() + static_cast<std::ptrdiff_t>(s.offset);
  return Tensor(s.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.size())));
}

}  // namespace detail

// What backward needs from one forward pass. Only valid for the parameter
// vector and batch that produced it.
struct ForwardCache {
  std::uint64_t params_fingerprint = 0;
  std::size_t batch_size = 0;
  std::vector<Tensor> layer_inputs;                // batched input of each layer
  std::vector<std::vector<PoolMask>> pool_masks;   // per layer, per example

  bool empty() const noexcept { return layer_inputs.empty(); }
};

struct ForwardResult {
  Tensor logits;
  ForwardCache cache;
};

namespace detail {

template <bool kKeepCache>
ForwardResult run_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch) {
  const auto shapes = infer_shapes(spec);
  check_layout(make_layout(spec), params.layout);
  if (batch.rank() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), batch.shape().begin() + 1))
    throw ShapeError("forward: batch " + shape_string(batch.shape()) + " does not match model input " +
                     shape_string(spec.input_shape));
  const std::size_t b = batch.extent(0);

  ForwardResult r;
  if constexpr (kKeepCache) {
    r.cache.params_fingerprint = fingerprint(params.values);
    r.cache.batch_size = b;
    r.cache.layer_inputs.reserve(spec.layers.size());
    r.cache.pool_masks.resize(spec.layers.size());
  }

  Tensor x = batch;
  std::size_t slice = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const Shape& in = shapes[li];
    const Shape& out = shapes[li + 1];
    Tensor y;
    if (std::holds_alternative<Conv3x3>(spec.layers[li])) {
      const Tensor kernels = slice_tensor(params, slice);
      const Tensor bias = slice_tensor(params, slice + 1);
      slice += 2;
      std::vector<double> data;
      data.reserve(b * shape_numel(out));
      for (std::size_t i = 0; i < b; ++i) {
        const Tensor o = conv2d(example_slice(x, i, in), kernels, bias);
        data.insert(data.end(), o.values().begin(), o.values().end());
      }
      y = Tensor(batched(b, out), std::move(data));
    } else if (std::holds_alternative<MaxPool2>(spec.layers[li])) {
      std::vector<double> data;
      data.reserve(b * shape_numel(out));
      for (std::size_t i = 0; i < b; ++i) {
        auto pooled = maxpool2(example_slice(x, i, in));
        data.insert(data.end(), pooled.output.values().begin(), pooled.output.values().end());
        if constexpr (kKeepCache) r.cache.pool_masks[li].push_back(std::move(pooled.mask));
      }
      y = Tensor(batched(b, out), std::move(data));
    } else if (auto* act = std::get_if<Act>(&spec.layers[li])) {
      y = activate(x, act->kind);
    } else if (std::holds_alternative<Flatten>(spec.layers[li])) {
      y = x.reshaped(batched(b, out));
    } else {
      const Tensor weight = slice_tensor(params, slice);
      const Tensor bias = slice_tensor(params, slice + 1);
      slice += 2;
      y = matmul(x, transpose(weight));
      const std::size_t units = out[0];
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t u = 0; u < units; ++u) y[i * units + u] += bias[u];
    }
    if constexpr (kKeepCache) r.cache.layer_inputs.push_back(std::move(x));
    x = std::move(y);
  }
  r.logits = std::move(x);
  return r;
}

}  // namespace detail

inline ForwardResult forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch) {
  return detail::run_forward<true>(spec, params, batch);
}

// Logits only; skips building the backward cache.
inline Tensor predict(const ModelSpec& spec, const ModelParams& params, const Tensor& batch) {
  return detail::run_forward<false>(spec, params, batch).logits;
}

// Gradient of sum(logits * grad_logits) with respect to every parameter,
// laid out like params.values.
inline std::vector<double> backward(const ModelSpec& spec, const ModelParams& params,
                                    const ForwardCache& cache, const Tensor& grad_logits) {
  if (cache.empty()) throw UsageError("backward: empty forward cache");
  if (cache.layer_inputs.size() != spec.layers.size())
    throw UsageError("backward: cache was produced by a different model");
  if (cache.params_fingerprint != detail::fingerprint(params.values))
    throw UsageError("backward: cache is stale for these parameters");
  const auto shapes = infer_shapes(spec);
  const std::size_t b = cache.batch_size;
  if (grad_logits.shape() != Shape{b, spec.num_classes})
    throw ShapeError("backward: grad_logits " + shape_string(grad_logits.shape()) + " expected " +
                     shape_string({b, spec.num_classes}));

  std::vector<double> grad(params.values.size(), 0.0);
  std::size_t slice = params.layout.size();
  Tensor g = grad_logits;
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const Shape& in = shapes[li];
    const Shape& out = shapes[li + 1];
    const Tensor& x = cache.layer_inputs[li];
    Tensor gx;
    if (std::holds_alternative<Conv3x3>(spec.layers[li])) {
      slice -= 2;
      Conv2dCache cc;
      cc.kernels = detail::slice_tensor(params, slice);
      const auto& wslice = params.layout[slice];
      const auto& bslice = params.layout[slice + 1];
      std::vector<double> data;
      data.reserve(b * shape_numel(in));
      for (std::size_t i = 0; i < b; ++i) {
        cc.input = detail::example_slice(x, i, in);
        const auto cg = conv2d_backward(cc, detail::example_slice(g, i, out));
        for (std::size_t k = 0; k < wslice.size(); ++k) grad[wslice.offset + k] += cg.kernels[k];
        for (std::size_t k = 0; k < bslice.size(); ++k) grad[bslice.offset + k] += cg.bias[k];
        data.insert(data.end(), cg.input.values().begin(), cg.input.values().end());
      }
      gx = Tensor(detail::batched(b, in), std::move(data));
    } else if (std::holds_alternative<MaxPool2>(spec.layers[li])) {
      const auto& masks = cache.pool_masks[li];
      if (masks.size() != b) throw UsageError("backward: pool masks missing from cache");
      std::vector<double> data;
      data.reserve(b * shape_numel(in));
      for (std::size_t i = 0; i < b; ++i) {
        const Tensor gi = maxpool2_backward(masks[i], detail::example_slice(g, i, out));
        data.insert(data.end(), gi.values().begin(), gi.values().end());
      }
      gx = Tensor(detail::batched(b, in), std::move(data));
    } else if (auto* act = std::get_if<Act>(&spec.layers[li])) {
      gx = activate_backward(x, g, act->kind);
    } else if (std::holds_alternative<Flatten>(spec.layers[li])) {
      gx = std::move(g).reshaped(detail::batched(b, in));
    } else {
      slice -= 2;
      const auto& wslice = params.layout[slice];
      const auto& bslice = params.layout[slice + 1];
      const Tensor gw = matmul(transpose(g), x);
      for (std::size_t k = 0; k < wslice.size(); ++k) grad[wslice.offset + k] += gw[k];
      const std::size_t units = out[0];
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t u = 0; u < units; ++u) grad[bslice.offset + u] += g[i * units + u];
      gx = matmul(g, detail::slice_tensor(params, slice));
    }
    g = std::move(gx);
  }
  return grad;
}

}  // namespace fedsim
