#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/bytes.hpp"
#include "fedsim/error.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

inline constexpr double kStdFloor = 1e-3;
inline constexpr double kStandardizedBound = 10.0;

// Per-channel statistics of pixels scaled to [0, 1].
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

struct Dataset {
  std::uint16_t channels = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::vector<std::uint8_t> pixels;  // example-major, then C x H x W
  std::vector<std::uint16_t> labels;
  std::vector<std::string> class_names;
  ChannelStats stats;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_size(), image_size());
  }
  std::size_t num_classes() const noexcept { return class_names.size(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Population mean/std over all pixels of each channel, std floored at kStdFloor.
// An empty dataset gets mean 0 / std 1.
inline ChannelStats compute_channel_stats(const Dataset& ds) {
  ChannelStats s{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 1.0)};
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  const double count = static_cast<double>(plane * ds.size());
  if (ds.size() == 0 || plane == 0) return s;
  for (std::size_t c = 0; c < ds.channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto img = ds.image(i).subspan(c * plane, plane);
      for (auto px : img) sum += px / 255.0;
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto img = ds.image(i).subspan(c * plane, plane);
      for (auto px : img) {
        const double d = px / 255.0 - mean;
        sq += d * d;
      }
    }
    s.mean[c] = mean;
    s.stddev[c] = std::max(std::sqrt(sq / count), kStdFloor);
  }
  return s;
}

inline void validate_dataset(const Dataset& ds) {
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0) throw OptionError("dataset has a zero image extent");
  if (ds.class_names.empty()) throw OptionError("dataset has no classes");
  if (ds.pixels.size() != ds.size() * ds.image_size())
    throw OptionError("dataset pixel buffer does not match " + std::to_string(ds.size()) + " images");
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] >= ds.class_names.size())
      throw LabelError("example " + std::to_string(i) + " has label " + std::to_string(ds.labels[i]) +
                       " but only " + std::to_string(ds.class_names.size()) + " classes exist");
}

// ---------------------------------------------------------------------------
// File codec ("FSDS", little-endian):
//   magic "FSDS" | u32 version=1 | u32 count | u16 C | u16 H | u16 W | u16 classes
//   per class: u16 len + name bytes
//   per example: u16 label + C*H*W u8 pixels
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<char> encode_dataset(const Dataset& ds) {
  validate_dataset(ds);
  bytes::Writer w;
  w.raw("FSDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u16(ds.channels);
  w.u16(ds.height);
  w.u16(ds.width);
  w.u16(static_cast<std::uint16_t>(ds.class_names.size()));
  for (const auto& name : ds.class_names) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
  }
  const std::size_t sz = ds.image_size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u16(ds.labels[i]);
    w.raw(std::string_view(reinterpret_cast<const char*>(ds.pixels.data() + i * sz), sz));
  }
  return w.buffer();
}

inline Dataset decode_dataset(const std::vector<char>& buf) {
  bytes::Reader r(buf);
  if (r.raw(4, "magic") != "FSDS") throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = r.offset();
  if (auto v = r.u32("version"); v != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  Dataset ds;
  const std::uint32_t count = r.u32("example count");
  ds.channels = r.u16("channels");
  ds.height = r.u16("height");
  ds.width = r.u16("width");
  const std::size_t classes_at = r.offset();
  const std::uint16_t classes = r.u16("class count");
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0)
    throw FormatError("zero image extent in header", classes_at - 6);
  if (classes == 0) throw FormatError("class count is zero", classes_at);
  for (std::uint16_t c = 0; c < classes; ++c) ds.class_names.push_back(r.raw(r.u16("class name length"), "class name"));

  const std::size_t sz = ds.image_size();
  const std::size_t record = 2 + sz;
  if (r.remaining() != static_cast<std::size_t>(count) * record)
    throw FormatError("header declares " + std::to_string(count) + " examples of " + std::to_string(record) +
                          " bytes but payload holds " + std::to_string(r.remaining()) + " bytes",
                      r.offset());
  ds.labels.reserve(count);
  ds.pixels.resize(static_cast<std::size_t>(count) * sz);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t label_at = r.offset();
    const std::uint16_t label = r.u16("label");
    if (label >= classes)
      throw FormatError("label " + std::to_string(label) + " of example " + std::to_string(i) + " >= class count " +
                            std::to_string(classes),
                        label_at);
    ds.labels.push_back(label);
    r.need(sz, "pixels");
    std::copy(r.data(), r.data() + sz, reinterpret_cast<char*>(ds.pixels.data() + i * sz));
    r.skip(sz);
  }
  ds.stats = compute_channel_stats(ds);
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { bytes::write_file(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::string& path) { return decode_dataset(bytes::read_file(path)); }

// ---------------------------------------------------------------------------
// Synthetic data: one Gaussian blob per class, jittered in position and
// brightness per example, plus uniform pixel noise.
// ---------------------------------------------------------------------------

struct SyntheticStyle {
  double background = 90.0;
  double amplitude_min = 30.0;
  double amplitude_max = 80.0;
  int max_shift = 2;  // blob centre moves up to this many pixels on each axis
  int noise = 25;     // pixel noise is uniform in [-noise, noise]
};

namespace detail {

// Blob centres sit on a ring around the image centre; widths cycle through
// three scales.
inline double blob_intensity(std::size_t k, std::size_t classes, std::size_t h, std::size_t w, double shift_y,
                             double shift_x, double amplitude, double background, std::size_t y, std::size_t x) {
  constexpr double kPi = 3.14159265358979323846;
  const double side = static_cast<double>(std::min(h, w));
  const double angle = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(classes);
  const double cy = static_cast<double>(h) / 2.0 - 0.5 + 0.25 * side * std::sin(angle) + shift_y;
  const double cx = static_cast<double>(w) / 2.0 - 0.5 + 0.25 * side * std::cos(angle) + shift_x;
  const double sigma = side * (0.12 + 0.04 * static_cast<double>(k % 3));
  const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
  return background + amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
}

}  // namespace detail

inline Dataset gen_synthetic(std::size_t classes, std::size_t per_class, std::size_t channels, std::size_t height,
                             std::size_t width, std::uint64_t seed, const SyntheticStyle& style = {}) {
  if (classes == 0 || per_class == 0 || channels == 0 || height == 0 || width == 0)
    throw OptionError("synthetic dataset counts must be positive");
  if (classes > std::numeric_limits<std::uint16_t>::max() || channels > 0xffff || height > 0xffff || width > 0xffff)
    throw OptionError("synthetic dataset extents exceed 16 bits");
  if (style.max_shift < 0 || style.noise < 0 || style.amplitude_min > style.amplitude_max)
    throw OptionError("invalid synthetic style");

  Dataset ds;
  ds.channels = static_cast<std::uint16_t>(channels);
  ds.height = static_cast<std::uint16_t>(height);
  ds.width = static_cast<std::uint16_t>(width);
  for (std::size_t k = 0; k < classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));

  Rng rng(seed);
  std::uniform_int_distribution<int> noise(-style.noise, style.noise);
  std::uniform_int_distribution<int> shift(-style.max_shift, style.max_shift);
  std::uniform_real_distribution<double> amplitude(style.amplitude_min, style.amplitude_max);
  const std::size_t sz = ds.image_size();
  ds.pixels.reserve(classes * per_class * sz);
  // Examples are interleaved by class: 0, 1, ..., classes-1, 0, 1, ...
  for (std::size_t e = 0; e < per_class; ++e) {
    for (std::size_t k = 0; k < classes; ++k) {
      ds.labels.push_back(static_cast<std::uint16_t>(k));
      const double sy = shift(rng), sx = shift(rng), amp = amplitude(rng);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
          for (std::size_t x = 0; x < width; ++x) {
            const double t = detail::blob_intensity(k, classes, height, width, sy, sx, amp, style.background, y, x);
            ds.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::round(t) + noise(rng), 0.0, 255.0)));
          }
        }
      }
    }
  }
  ds.stats = compute_channel_stats(ds);
  return ds;
}

struct SyntheticSplits {
  Dataset train;
  Dataset test;
};

// Train and test drawn from independent streams of the same seed.
inline SyntheticSplits gen_synthetic_splits(std::size_t classes, std::size_t per_class_train,
                                            std::size_t per_class_test, std::size_t channels, std::size_t height,
                                            std::size_t width, std::uint64_t seed,
                                            const SyntheticStyle& style = {}) {
  return {gen_synthetic(classes, per_class_train, channels, height, width, derive_seed(seed, StreamPurpose::synthetic),
                        style),
          gen_synthetic(classes, per_class_test, channels, height, width,
                        derive_seed(seed, StreamPurpose::synthetic_test), style)};
}

// ---------------------------------------------------------------------------
// Preprocessing: crop -> optional horizontal flip -> /255 -> optional
// per-channel standardization.
// ---------------------------------------------------------------------------

// Crop placement for evaluation. Evaluation never flips.
enum class EvalCrop { center, random };

struct PreprocessOpts {
  std::size_t crop_height = 0;  // 0 keeps the full extent
  std::size_t crop_width = 0;
  double flip_prob = 0.0;
  bool standardize = true;
  std::size_t replicate_channels = 0;  // 0 keeps the source channel count; else 1-channel input is tiled
  EvalCrop eval_crop = EvalCrop::center;

  std::size_t out_height(std::size_t h) const { return crop_height ? crop_height : h; }
  std::size_t out_width(std::size_t w) const { return crop_width ? crop_width : w; }
  std::size_t out_channels(std::size_t c) const { return replicate_channels ? replicate_channels : c; }
};

struct ImageGeometry {
  std::size_t channels, height, width;
};

inline ImageGeometry geometry_of(const Dataset& ds) { return {ds.channels, ds.height, ds.width}; }

inline void validate_preprocess(const PreprocessOpts& opts, const ImageGeometry& g) {
  if (opts.out_height(g.height) > g.height || opts.out_width(g.width) > g.width)
    throw OptionError("crop " + std::to_string(opts.out_height(g.height)) + "x" +
                      std::to_string(opts.out_width(g.width)) + " is larger than image " + std::to_string(g.height) +
                      "x" + std::to_string(g.width));
  if (!(opts.flip_prob >= 0.0 && opts.flip_prob <= 1.0)) throw OptionError("flip probability must be in [0, 1]");
  if (opts.replicate_channels && opts.replicate_channels != g.channels && g.channels != 1)
    throw OptionError("channel replication needs single-channel input, image has " + std::to_string(g.channels));
}

// Shape of one preprocessed example.
inline Shape preprocessed_shape(const PreprocessOpts& opts, const ImageGeometry& g) {
  return {opts.out_channels(g.channels), opts.out_height(g.height), opts.out_width(g.width)};
}

// Mirror a C x H x W tensor left to right.
inline Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("hflip expects C x H x W, got " + shape_string(image.shape()));
  const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

namespace detail {

inline Tensor crop_scale(std::span<const std::uint8_t> image, const ImageGeometry& g, const PreprocessOpts& opts,
                         const ChannelStats& stats, std::size_t top, std::size_t left, bool flip) {
  const std::size_t oh = opts.out_height(g.height), ow = opts.out_width(g.width);
  const std::size_t oc = opts.out_channels(g.channels);
  if (opts.standardize && (stats.mean.size() != g.channels || stats.stddev.size() != g.channels))
    throw OptionError("standardization needs statistics for " + std::to_string(g.channels) + " channels");
  Tensor out({oc, oh, ow});
  for (std::size_t c = 0; c < oc; ++c) {
    const std::size_t src_c = g.channels == 1 ? 0 : c;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t sx = left + (flip ? ow - 1 - x : x);
        double v = image[(src_c * g.height + top + y) * g.width + sx] / 255.0;
        if (opts.standardize) {
          v = (v - stats.mean[src_c]) / stats.stddev[src_c];
          v = std::clamp(v, -kStandardizedBound, kStandardizedBound);
        }
        out[(c * oh + y) * ow + x] = v;
      }
    }
  }
  return out;
}

}  // namespace detail

// Training-time preprocessing: uniform random crop and random flip. Always
// draws exactly three numbers from rng so the stream position does not depend
// on the options.
inline Tensor preprocess(std::span<const std::uint8_t> image, const ImageGeometry& g, const PreprocessOpts& opts,
                         const ChannelStats& stats, Rng& rng) {
  validate_preprocess(opts, g);
  if (image.size() != g.channels * g.height * g.width) throw ShapeError("preprocess: image buffer size mismatch");
  const std::size_t oh = opts.out_height(g.height), ow = opts.out_width(g.width);
  const std::size_t top = std::uniform_int_distribution<std::size_t>(0, g.height - oh)(rng);
  const std::size_t left = std::uniform_int_distribution<std::size_t>(0, g.width - ow)(rng);
  const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < opts.flip_prob;
  return detail::crop_scale(image, g, opts, stats, top, left, flip);
}

// Evaluation-time preprocessing: never flipped; centre crop, or a uniform
// crop drawn from crop_rng when opts.eval_crop is random.
inline Tensor preprocess_eval(std::span<const std::uint8_t> image, const ImageGeometry& g, const PreprocessOpts& opts,
                              const ChannelStats& stats, Rng* crop_rng = nullptr) {
  validate_preprocess(opts, g);
  if (image.size() != g.channels * g.height * g.width) throw ShapeError("preprocess: image buffer size mismatch");
  const std::size_t oh = opts.out_height(g.height), ow = opts.out_width(g.width);
  std::size_t top = (g.height - oh) / 2, left = (g.width - ow) / 2;
  if (opts.eval_crop == EvalCrop::random) {
    if (!crop_rng) throw UsageError("preprocess_eval: random evaluation crop needs an RNG stream");
    top = std::uniform_int_distribution<std::size_t>(0, g.height - oh)(*crop_rng);
    left = std::uniform_int_distribution<std::size_t>(0, g.width - ow)(*crop_rng);
  }
  return detail::crop_scale(image, g, opts, stats, top, left, false);
}

namespace detail {

template <class Prep>
Batch stack_batch(const Dataset& ds, std::span<const std::size_t> indices, const PreprocessOpts& opts, Prep&& prep) {
  if (indices.empty()) throw ShapeError("make_batch: empty index list");
  const ImageGeometry g = geometry_of(ds);
  const Shape ex = preprocessed_shape(opts, g);
  std::vector<double> data;
  data.reserve(indices.size() * shape_numel(ex));
  Batch b;
  b.labels.reserve(indices.size());
  for (auto i : indices) {
    const Tensor t = prep(ds.image(i), g);
    data.insert(data.end(), t.values().begin(), t.values().end());
    b.labels.push_back(ds.labels[i]);
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), ex.begin(), ex.end());
  b.inputs = Tensor(std::move(shape), std::move(data));
  return b;
}

}  // namespace detail

// Stacks the given examples into an evaluation batch.
inline Batch make_eval_batch(const Dataset& ds, std::span<const std::size_t> indices, const PreprocessOpts& opts,
                             const ChannelStats& stats, Rng* crop_rng = nullptr) {
  return detail::stack_batch(ds, indices, opts, [&](std::span<const std::uint8_t> img, const ImageGeometry& g) {
    return preprocess_eval(img, g, opts, stats, crop_rng);
  });
}

// Stacks the given examples into a batch. rng == nullptr selects evaluation
// preprocessing.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, const PreprocessOpts& opts,
                        const ChannelStats& stats, Rng* rng) {
  if (!rng) return make_eval_batch(ds, indices, opts, stats);
  return detail::stack_batch(ds, indices, opts, [&](std::span<const std::uint8_t> img, const ImageGeometry& g) {
    return preprocess(img, g, opts, stats, *rng);
  });
}

// ---------------------------------------------------------------------------
// Client partitioning
// ---------------------------------------------------------------------------

struct PartitionScheme {
  enum class Kind { iid, dirichlet, shards };
  Kind kind = Kind::iid;
  double alpha = 0.0;                 // dirichlet only
  std::size_t shards_per_client = 0;  // shards only

  std::string to_string() const {
    switch (kind) {
      case Kind::iid: return "iid";
      case Kind::dirichlet: return "dirichlet(" + std::to_string(alpha) + ")";
      case Kind::shards: return "shards(" + std::to_string(shards_per_client) + ")";
    }
    return "?";
  }
};

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> clients;  // each list sorted ascending
  PartitionScheme scheme;
  std::uint64_t seed = 0;

  std::size_t num_clients() const noexcept { return clients.size(); }
};

// Disjoint, covering [0, total) exactly, every client non-empty.
inline void validate_plan(const PartitionPlan& plan, std::size_t total) {
  std::vector<char> seen(total, 0);
  std::size_t covered = 0;
  for (std::size_t c = 0; c < plan.clients.size(); ++c) {
    if (plan.clients[c].empty()) throw PartitionError("client " + std::to_string(c) + " has no examples");
    for (auto i : plan.clients[c]) {
      if (i >= total) throw PartitionError("index " + std::to_string(i) + " out of range");
      if (seen[i]) throw PartitionError("index " + std::to_string(i) + " assigned twice");
      seen[i] = 1;
      ++covered;
    }
  }
  if (covered != total) throw PartitionError("plan covers " + std::to_string(covered) + " of " + std::to_string(total));
}

namespace detail {

inline void check_client_count(std::size_t n_clients, std::size_t total) {
  if (n_clients == 0) throw PartitionError("need at least one client");
  if (n_clients > total)
    throw PartitionError(std::to_string(n_clients) + " clients but only " + std::to_string(total) + " examples");
}

inline void sort_clients(PartitionPlan& plan) {
  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
}

// log of a Gamma(alpha, 1) draw via Gamma(alpha + 1) * U^(1/alpha), which stays
// finite for tiny alpha where the direct draw underflows to zero.
inline double log_gamma_draw(double alpha, Rng& rng) {
  const double g = std::gamma_distribution<double>(alpha + 1.0, 1.0)(rng);
  const double u = 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng);  // (0, 1]
  return std::log(g) + std::log(u) / alpha;
}

}  // namespace detail

// Random permutation cut into near-equal consecutive parts (sizes differ by <= 1).
inline PartitionPlan partition_iid(const Dataset& ds, std::size_t n_clients, std::uint64_t seed) {
  const std::size_t total = ds.size();
  detail::check_client_count(n_clients, total);
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  PartitionPlan plan{std::vector<std::vector<std::size_t>>(n_clients), {PartitionScheme::Kind::iid}, seed};
  const std::size_t base = total / n_clients, extra = total % n_clients;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < n_clients; ++c) {
    const std::size_t n = base + (c < extra ? 1 : 0);
    plan.clients[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                           perm.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  detail::sort_clients(plan);
  return plan;
}

// Label skew: each class is split across clients by proportions drawn from
// Dirichlet(alpha * 1_N), rounded with largest remainders. Clients left empty
// take one example at a time from the currently largest client.
inline PartitionPlan partition_dirichlet(const Dataset& ds, std::size_t n_clients, double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0)) throw PartitionError("dirichlet alpha must be > 0");
  const std::size_t total = ds.size();
  detail::check_client_count(n_clients, total);

  std::vector<std::vector<std::size_t>> by_class(std::max<std::size_t>(ds.num_classes(), 1));
  for (std::size_t i = 0; i < total; ++i) by_class.at(ds.labels[i]).push_back(i);

  Rng rng(seed);
  PartitionPlan plan{std::vector<std::vector<std::size_t>>(n_clients),
                     {PartitionScheme::Kind::dirichlet, alpha, 0}, seed};
  std::vector<double> logw(n_clients), quota(n_clients);
  std::vector<std::size_t> counts(n_clients), order(n_clients);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (auto& lw : logw) lw = detail::log_gamma_draw(alpha, rng);
    if (members.empty()) continue;
    const double mx = *std::max_element(logw.begin(), logw.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < n_clients; ++c) sum += std::exp(logw[c] - mx);

    std::size_t assigned = 0;
    for (std::size_t c = 0; c < n_clients; ++c) {
      quota[c] = std::exp(logw[c] - mx) / sum * static_cast<double>(members.size());
      counts[c] = static_cast<std::size_t>(std::floor(quota[c]));
      assigned += counts[c];
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
    });
    for (std::size_t r = 0; assigned < members.size(); ++r, ++assigned) ++counts[order[r % n_clients]];

    std::size_t pos = 0;
    for (std::size_t c = 0; c < n_clients; ++c) {
      plan.clients[c].insert(plan.clients[c].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                             members.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
      pos += counts[c];
    }
  }

  for (std::size_t c = 0; c < n_clients; ++c) {
    while (plan.clients[c].empty()) {
      auto donor = std::max_element(plan.clients.begin(), plan.clients.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
      plan.clients[c].push_back(donor->back());
      donor->pop_back();
    }
  }
  detail::sort_clients(plan);
  return plan;
}

// Sort by label, cut into N*s equal shards, deal s random shards per client.
inline PartitionPlan partition_shards(const Dataset& ds, std::size_t n_clients, std::size_t shards_per_client,
                                      std::uint64_t seed) {
  const std::size_t total = ds.size();
  detail::check_client_count(n_clients, total);
  if (shards_per_client == 0) throw PartitionError("shards per client must be positive");
  const std::size_t n_shards = n_clients * shards_per_client;
  if (n_shards > total || total % n_shards != 0)
    throw PartitionError(std::to_string(total) + " examples cannot be cut into " + std::to_string(n_shards) +
                         " equal shards");
  std::vector<std::size_t> sorted(total);
  std::iota(sorted.begin(), sorted.end(), std::size_t{0});
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });

  std::vector<std::size_t> shard_ids(n_shards);
  std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(shard_ids.begin(), shard_ids.end(), rng);

  const std::size_t shard_size = total / n_shards;
  PartitionPlan plan{std::vector<std::vector<std::size_t>>(n_clients),
                     {PartitionScheme::Kind::shards, 0.0, shards_per_client}, seed};
  for (std::size_t c = 0; c < n_clients; ++c) {
    for (std::size_t s = 0; s < shards_per_client; ++s) {
      const std::size_t first = shard_ids[c * shards_per_client + s] * shard_size;
      plan.clients[c].insert(plan.clients[c].end(), sorted.begin() + static_cast<std::ptrdiff_t>(first),
                             sorted.begin() + static_cast<std::ptrdiff_t>(first + shard_size));
    }
  }
  detail::sort_clients(plan);
  return plan;
}

inline PartitionPlan make_partition(const Dataset& ds, std::size_t n_clients, const PartitionScheme& scheme,
                                    std::uint64_t seed) {
  switch (scheme.kind) {
    case PartitionScheme::Kind::iid: return partition_iid(ds, n_clients, seed);
    case PartitionScheme::Kind::dirichlet: return partition_dirichlet(ds, n_clients, scheme.alpha, seed);
    case PartitionScheme::Kind::shards: return partition_shards(ds, n_clients, scheme.shards_per_client, seed);
  }
  throw PartitionError("unknown partition scheme");
}

}  // namespace fedsim
