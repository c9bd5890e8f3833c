#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamWHyper {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw OptionError("learning rate must be > 0");
    if (!(weight_decay >= 0)) throw OptionError("weight decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw OptionError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw OptionError("beta2 must be in [0, 1)");
    if (!(eps > 0)) throw OptionError("eps must be > 0");
  }
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  static AdamWState fresh(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }

  friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

struct AdamWResult {
  std::vector<double> params;
  AdamWState state;
};

// One step. The decay term lambda * theta is applied to the parameters
// directly and never enters the moment estimates:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta)
inline AdamWResult adamw_step(std::span<const double> params, std::span<const double> grad,
                              const AdamWState& state, const AdamWHyper& hyper) {
  hyper.validate();
  const std::size_t n = params.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n)
    throw ShapeError("adamw_step: params " + std::to_string(n) + ", grad " + std::to_string(grad.size()) +
                     ", state " + std::to_string(state.m.size()) + "/" + std::to_string(state.v.size()));
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(grad[i]))
      throw NumericError("adamw_step: non-finite gradient at index " + std::to_string(i));

  AdamWResult r{std::vector<double>(n), AdamWState{std::vector<double>(n), std::vector<double>(n), state.t + 1}};
  const double t = static_cast<double>(r.state.t);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    const double m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    const double v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    const double theta = params[i];
    r.params[i] = theta - hyper.lr * (m_hat / (std::sqrt(v_hat) + hyper.eps) + hyper.weight_decay * theta);
    r.state.m[i] = m;
    r.state.v[i] = v;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

// Mean over the batch of -log softmax(logits)[label]. grad_logits is
// (softmax - onehot) / b.
inline LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch x classes], got " + shape_string(logits.shape()));
  const std::size_t b = logits.extent(0), n = logits.extent(1);
  if (labels.size() != b)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(b));
  for (std::size_t i = 0; i < b; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n)
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(n) + ")");

  const Tensor logp = log_softmax(logits);
  const double inv_b = 1.0 / static_cast<double>(b);
  LossResult r{0.0, Tensor(logits.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    total -= logp[i * n + y];
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(logp[i * n + j]);
      r.grad_logits[i * n + j] = (p - (j == y ? 1.0 : 0.0)) * inv_b;
    }
  }
  r.loss = total * inv_b;
  return r;
}

// H(Y, P) = -sum_j Y_j log P_j per row, averaged over rows.
inline double cross_entropy_from_distributions(const Tensor& target, const Tensor& predicted) {
  if (target.rank() != 2 || target.shape() != predicted.shape())
    throw ShapeError("cross_entropy_from_distributions: shapes " + shape_string(target.shape()) + " and " +
                     shape_string(predicted.shape()));
  const std::size_t b = target.extent(0), n = target.extent(1);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double sy = 0.0, sp = 0.0, row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double y = target[i * n + j], p = predicted[i * n + j];
      if (y < 0 || p < 0) throw NumericError("distribution has a negative entry in row " + std::to_string(i));
      sy += y;
      sp += p;
      if (y > 0) {
        if (p <= 0)
          throw NumericError("target mass on class " + std::to_string(j) + " in row " + std::to_string(i) +
                             " where the predicted probability is zero");
        row -= y * std::log(p);
      }
    }
    if (std::abs(sy - 1.0) > 1e-9 || std::abs(sp - 1.0) > 1e-9)
      throw NumericError("row " + std::to_string(i) + " is not a probability distribution");
    total += row;
  }
  return total / static_cast<double>(b);
}

}  // namespace fedsim
