#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedsim/tensor.hpp"
#include "oracles.hpp"

using fedsim::Activation;
using fedsim::Shape;
using fedsim::Tensor;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  const auto n = fedsim::shape_numel(shape);
  return Tensor(std::move(shape), oracle::random_vec(n, rng));
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), fedsim::ShapeError);
  EXPECT_THROW(Tensor({2, 0}), fedsim::ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Matmul, IdentityAndZero) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(fedsim::matmul(eye, m), m);
  EXPECT_EQ(fedsim::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {0, 0})), Tensor({1, 1}, {0}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const auto expected = oracle::matmul(a.vector(), b.vector(), 3, 4, 2);
  const auto got = fedsim::matmul(a, b);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(Matmul, ShapeMismatch) {
  EXPECT_THROW(fedsim::matmul(Tensor({2, 3}), Tensor({2, 3})), fedsim::ShapeError);
}

TEST(Conv2d, ZeroKernelGivesZero) {
  std::mt19937_64 rng(1);
  const Tensor in = random_tensor({2, 4, 4}, rng);
  const auto out = fedsim::conv2d(in, Tensor({3, 2, 3, 3}), Tensor({3}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(2);
  const Tensor in = random_tensor({1, 5, 6}, rng);
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0;
  EXPECT_EQ(fedsim::conv2d(in, k, Tensor({1})), in);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(3);
  const Tensor in = random_tensor({2, 5, 5}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const auto expected = oracle::conv2d(in.vector(), k.vector(), b.vector(), 2, 5, 5, 3);
  const auto got = fedsim::conv2d(in, k, b);
  ASSERT_EQ(got.shape(), (Shape{3, 5, 5}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(Conv2d, ChannelMismatch) {
  EXPECT_THROW(fedsim::conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor({1})), fedsim::ShapeError);
}

TEST(Conv2dBackward, MissingCache) {
  EXPECT_THROW(fedsim::conv2d_backward(fedsim::Conv2dCache{}, Tensor({1, 2, 2})), fedsim::UsageError);
}

TEST(Conv2dBackward, ZeroUpstreamAndBiasIdentity) {
  std::mt19937_64 rng(4);
  fedsim::Conv2dCache cache;
  const Tensor k = random_tensor({2, 3, 3, 3}, rng);
  fedsim::conv2d(random_tensor({3, 4, 4}, rng), k, Tensor({2}), cache);

  const auto zero = fedsim::conv2d_backward(cache, Tensor({2, 4, 4}));
  for (const Tensor* t : {&zero.input, &zero.kernels, &zero.bias})
    for (double v : t->values()) EXPECT_EQ(v, 0.0);

  const Tensor g = random_tensor({2, 4, 4}, rng);
  const auto grads = fedsim::conv2d_backward(cache, g);
  for (std::size_t o = 0; o < 2; ++o) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += g[o * 16 + i];
    EXPECT_NEAR(grads.bias[o], s, 1e-12);
  }
}

// Loss = sum(conv(x) * g) is linear in every input, so its gradient is exactly
// what conv2d_backward returns.
TEST(Conv2dBackward, FiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cin = 1 + trial % 2, cout = 1 + trial % 3, h = 3 + trial % 3, w = 4;
    const Tensor x = random_tensor({cin, h, w}, rng), k = random_tensor({cout, cin, 3, 3}, rng),
                 b = random_tensor({cout}, rng), g = random_tensor({cout, h, w}, rng);
    fedsim::Conv2dCache cache;
    fedsim::conv2d(x, k, b, cache);
    const auto grads = fedsim::conv2d_backward(cache, g);
    auto loss = [&](const oracle::Vec& xv, const oracle::Vec& kv, const oracle::Vec& bv) {
      const auto out = oracle::conv2d(xv, kv, bv, cin, h, w, cout);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * g[i];
      return s;
    };
    const std::size_t xi = trial % x.numel(), ki = (trial * 7) % k.numel(), bi = trial % cout;
    EXPECT_LT(oracle::rel_err(grads.input[xi], oracle::central_diff([&](const oracle::Vec& v) { return loss(v, k.vector(), b.vector()); }, x.vector(), xi)), 1e-5);
    EXPECT_LT(oracle::rel_err(grads.kernels[ki], oracle::central_diff([&](const oracle::Vec& v) { return loss(x.vector(), v, b.vector()); }, k.vector(), ki)), 1e-5);
    EXPECT_LT(oracle::rel_err(grads.bias[bi], oracle::central_diff([&](const oracle::Vec& v) { return loss(x.vector(), k.vector(), v); }, b.vector(), bi)), 1e-5);
  }
}

TEST(MaxPool2, ConstantInput) {
  const auto r = fedsim::maxpool2(Tensor::full({2, 4, 6}, 3.5));
  ASSERT_EQ(r.output.shape(), (Shape{2, 2, 3}));
  for (double v : r.output.values()) EXPECT_EQ(v, 3.5);
  // all ties resolve to the top-left element of each window
  EXPECT_EQ(r.mask.argmax[0], 0u);
  EXPECT_EQ(r.mask.argmax[1], 2u);
}

TEST(MaxPool2, SingleWindow) {
  const auto r = fedsim::maxpool2(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(r.output[0], 4.0);
  const auto g = fedsim::maxpool2_backward(r.mask, Tensor({1, 1, 1}, {1.0}));
  EXPECT_EQ(g, Tensor({1, 2, 2}, {0, 0, 0, 1}));
}

TEST(MaxPool2, MatchesWindowScan) {
  std::mt19937_64 rng(6);
  const Tensor in = random_tensor({3, 6, 8}, rng);
  const auto expected = oracle::maxpool2(in.vector(), 3, 6, 8);
  EXPECT_EQ(fedsim::maxpool2(in).output.vector(), expected);
}

TEST(MaxPool2, OddExtent) { EXPECT_THROW(fedsim::maxpool2(Tensor({1, 3, 4})), fedsim::ShapeError); }

TEST(MaxPool2, BackwardFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({2, 4, 4}, rng), g = random_tensor({2, 2, 2}, rng);
    const auto r = fedsim::maxpool2(x);
    const auto gx = fedsim::maxpool2_backward(r.mask, g);
    const std::size_t i = (trial * 5) % x.numel();
    auto loss = [&](const oracle::Vec& v) {
      const auto o = oracle::maxpool2(v, 2, 4, 4);
      double s = 0;
      for (std::size_t j = 0; j < o.size(); ++j) s += o[j] * g[j];
      return s;
    };
    EXPECT_LT(oracle::rel_err(gx[i], oracle::central_diff(loss, x.vector(), i)), 1e-5);
  }
}

TEST(Activation, Definitions) {
  const Tensor x({3}, {-1, 2, 0});
  EXPECT_EQ(fedsim::activate(x, Activation::relu), Tensor({3}, {0, 2, 0}));
  EXPECT_EQ(fedsim::activate(x, Activation::silu)[2], 0.0);
  // relu'(0) := 0
  EXPECT_EQ(fedsim::activate_backward(x, Tensor::full({3}, 1.0), Activation::relu), Tensor({3}, {0, 1, 0}));
}

TEST(Activation, BackwardFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (auto kind : {Activation::relu, Activation::silu}) {
    for (int trial = 0; trial < 100; ++trial) {
      oracle::Vec xv = oracle::random_vec(6, rng, -3, 3);
      for (auto& v : xv)
        if (std::abs(v) < 1e-3) v = 0.5;  // stay off the relu kink
      const Tensor x({6}, xv), g = random_tensor({6}, rng);
      const auto gx = fedsim::activate_backward(x, g, kind);
      const std::size_t i = trial % 6;
      auto loss = [&](const oracle::Vec& v) {
        double s = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
          const double a = kind == Activation::relu ? std::max(0.0, v[j]) : v[j] / (1 + std::exp(-v[j]));
          s += a * g[j];
        }
        return s;
      };
      EXPECT_LT(oracle::rel_err(gx[i], oracle::central_diff(loss, xv, i)), 1e-6);
    }
  }
}

TEST(LogSoftmax, UniformRow) {
  const auto r = fedsim::log_softmax(Tensor({1, 4}));
  for (double v : r.values()) EXPECT_NEAR(v, -std::log(4.0), 1e-12);
  EXPECT_NEAR(r[0], -1.3862944, 1e-7);
}

TEST(LogSoftmax, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 5}, rng);
    const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
    std::vector<double> shifted = x.vector();
    for (auto& v : shifted) v += c;
    const auto a = fedsim::log_softmax(x), b = fedsim::log_softmax(Tensor({3, 5}, shifted));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) s += std::exp(a[r * 5 + j]);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LogSoftmax, LargeLogitsStayFinite) {
  const auto r = fedsim::log_softmax(Tensor({1, 2}, {1000, 0}));
  EXPECT_NEAR(r[0], 0.0, 1e-12);
  EXPECT_NEAR(r[1], -1000.0, 1e-9);
}

TEST(Kernels, Deterministic) {
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({2, 6, 6}, rng), k = random_tensor({4, 2, 3, 3}, rng), b = random_tensor({4}, rng);
  EXPECT_EQ(fedsim::conv2d(x, k, b), fedsim::conv2d(x, k, b));
  EXPECT_EQ(fedsim::maxpool2(x).output, fedsim::maxpool2(x).output);
  EXPECT_EQ(fedsim::activate(x, Activation::silu), fedsim::activate(x, Activation::silu));
}
