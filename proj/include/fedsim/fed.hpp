#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/error.hpp"
#include "fedsim/model.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// How aggregation and the global loss weight client n_i.
//   samples:      n_i / sum_j n_j over the participating clients (FedAvg)
//   device_count: n_i / N with N the number of participating clients. Not a
//                 convex combination; kept only for side-by-side comparison.
enum class Weighting { samples, device_count };

struct FederationConfig {
  std::size_t num_clients = 1;
  std::size_t clients_per_round = 1;
  std::size_t rounds = 30;
  std::size_t local_epochs = 2;
  std::size_t batch_size = 32;
  AdamWHyper optimizer;
  double proximal_mu = 0.0;
  std::uint64_t seed = 0;
  Weighting weighting = Weighting::samples;

  void validate() const {
    if (num_clients == 0) throw ConfigError("clients must be >= 1");
    if (clients_per_round == 0 || clients_per_round > num_clients)
      throw ConfigError("clients_per_round must be in [1, " + std::to_string(num_clients) + "]");
    if (rounds == 0) throw ConfigError("rounds must be >= 1");
    if (local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(proximal_mu >= 0)) throw ConfigError("proximal_mu must be >= 0");
    try {
      optimizer.validate();
    } catch (const OptionError& e) {
      throw ConfigError(e.what());
    }
  }
};

struct LocalStats {
  double loss = 0.0;      // final-epoch mean training loss
  double accuracy = 0.0;  // final-epoch training accuracy
  std::size_t steps = 0;  // optimizer steps over all epochs
};

struct ClientState {
  std::size_t id = 0;
  std::vector<std::size_t> indices;
  LocalStats last;  // stats from the last round this client trained in

  std::size_t samples() const noexcept { return indices.size(); }
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<std::size_t> sampled_clients;
  std::vector<std::size_t> client_samples;
  std::vector<double> client_train_loss;
  std::vector<double> client_train_acc;
  double global_test_loss = 0.0;
  double global_test_acc = 0.0;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

// What a client needs to train besides its own shard and the global model.
struct TrainingContext {
  const ModelSpec& spec;
  const Dataset& train;
  const PreprocessOpts& preprocess;
  const ChannelStats& stats;
};

struct LocalResult {
  ModelParams params;
  LocalStats stats;
};

struct ClientUpdate {
  std::size_t samples = 0;
  ModelParams params;
};

// ---------------------------------------------------------------------------

// K distinct ids out of [0, N), returned in ascending order.
inline std::vector<std::size_t> sample_clients(std::size_t n_clients, std::size_t per_round, Rng& rng) {
  if (per_round == 0 || per_round > n_clients)
    throw ConfigError("cannot sample " + std::to_string(per_round) + " of " + std::to_string(n_clients) + " clients");
  std::vector<std::size_t> ids(n_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (per_round == n_clients) return ids;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < per_round; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n_clients - 1)(rng);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(per_round);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.extent(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(logits.values().subspan(i * n, n)) == static_cast<std::size_t>(labels[i])) ++correct;
  return correct;
}

// E epochs of mini-batch AdamW on the client's shard, starting from the
// global parameters with a fresh optimizer state. The shard order is
// reshuffled every epoch and the last short batch is kept. With mu > 0 the
// gradient of (mu/2)||theta - w_global||^2 is added before each step.
inline LocalResult local_train(const ClientState& client, const ModelParams& global, const FederationConfig& config,
                               const TrainingContext& ctx, Rng& rng) {
  if (client.indices.empty()) throw ProtocolError("client " + std::to_string(client.id) + " has no examples");
  std::vector<double> theta = global.values;
  AdamWState state = AdamWState::fresh(theta.size());
  std::vector<std::size_t> order = client.indices;
  const std::size_t n = order.size();

  LocalResult result;
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, n - start);
      const Batch batch =
          make_batch(ctx.train, std::span<const std::size_t>(order).subspan(start, len), ctx.preprocess, ctx.stats, &rng);
      const ModelParams current{std::move(theta), global.layout};
      auto fwd = forward(ctx.spec, current, batch.inputs);
      const auto ce = cross_entropy(fwd.logits, batch.labels);
      auto grad = backward(ctx.spec, current, fwd.cache, ce.grad_logits);
      if (config.proximal_mu > 0)
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += config.proximal_mu * (current.values[i] - global.values[i]);
      auto step = adamw_step(current.values, grad, state, config.optimizer);
      theta = std::move(step.params);
      state = std::move(step.state);
      ++result.stats.steps;
      loss_sum += ce.loss * static_cast<double>(len);
      correct += count_correct(fwd.logits, batch.labels);
    }
    result.stats.loss = loss_sum / static_cast<double>(n);
    result.stats.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  result.params = ModelParams{std::move(theta), global.layout};
  return result;
}

namespace detail {

inline void check_updates(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ProtocolError("aggregate: no client updates");
  for (const auto& u : updates) {
    if (u.samples == 0) throw ProtocolError("aggregate: update with zero samples");
    check_layout(updates.front().params.layout, u.params.layout);
    if (u.params.values.size() != updates.front().params.values.size())
      throw LayoutError("aggregate: parameter vectors differ in length");
  }
}

inline ModelParams weighted_sum(std::span<const ClientUpdate> updates, std::span<const double> weights) {
  ModelParams out{std::vector<double>(updates.front().params.values.size(), 0.0), updates.front().params.layout};
  for (std::size_t k = 0; k < updates.size(); ++k) {
    const auto& w = updates[k].params.values;
    for (std::size_t i = 0; i < w.size(); ++i) out.values[i] += weights[k] * w[i];
  }
  return out;
}

}  // namespace detail

// Aggregation weights in update order. Summation order is the update order, so
// callers that pass updates sorted by client id get scheduling-independent bits.
inline std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates,
                                               Weighting weighting = Weighting::samples) {
  detail::check_updates(updates);
  double denom = 0.0;
  if (weighting == Weighting::samples) {
    for (const auto& u : updates) denom += static_cast<double>(u.samples);
  } else {
    denom = static_cast<double>(updates.size());
  }
  std::vector<double> w;
  w.reserve(updates.size());
  for (const auto& u : updates) w.push_back(static_cast<double>(u.samples) / denom);
  return w;
}

// w_global = sum_i n_i w_i / sum_i n_i
inline ModelParams aggregate(std::span<const ClientUpdate> updates, Weighting weighting = Weighting::samples) {
  const auto w = aggregation_weights(updates, weighting);
  return detail::weighted_sum(updates, w);
}

struct ClientLoss {
  std::size_t samples = 0;
  double loss = 0.0;
};

// L(w) = sum_i n_i L_i / sum_i n_i
inline double global_loss(std::span<const ClientLoss> per_client, Weighting weighting = Weighting::samples) {
  if (per_client.empty()) throw ProtocolError("global_loss: no clients");
  double denom = 0.0, total = 0.0;
  for (const auto& c : per_client) {
    if (c.samples == 0) throw ProtocolError("global_loss: client with zero samples");
    denom += weighting == Weighting::samples ? static_cast<double>(c.samples) : 1.0;
    total += static_cast<double>(c.samples) * c.loss;
  }
  return total / denom;
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

// Evaluation without flips; the crop follows opts.eval_crop (random crops draw
// from crop_rng in example order). Accuracy ties go to the lowest class id.
inline EvalResult evaluate(const ModelSpec& spec, const ModelParams& params, const Dataset& test,
                           const PreprocessOpts& opts, const ChannelStats& stats, std::size_t chunk = 256,
                           Rng* crop_rng = nullptr) {
  if (test.size() == 0) throw ProtocolError("evaluate: empty test split");
  std::vector<std::size_t> all(test.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < all.size(); start += chunk) {
    const std::size_t len = std::min(chunk, all.size() - start);
    const Batch batch = make_eval_batch(test, std::span<const std::size_t>(all).subspan(start, len), opts, stats, crop_rng);
    const Tensor logits = predict(spec, params, batch.inputs);
    loss_sum += cross_entropy(logits, batch.labels).loss * static_cast<double>(len);
    correct += count_correct(logits, batch.labels);
  }
  const double n = static_cast<double>(test.size());
  return {static_cast<double>(correct) / n, loss_sum / n};
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

struct FederationData {
  const Dataset& train;
  const Dataset& test;
  PartitionPlan plan;
  PreprocessOpts preprocess;
  ChannelStats stats;  // training-split statistics, used for both splits
};

struct RunOptions {
  std::size_t threads = 0;  // 0 runs clients sequentially on the calling thread
  std::function<void(const RoundRecord&)> on_round;
};

struct FederationResult {
  std::vector<RoundRecord> rounds;
  ModelParams final_params;
  std::vector<ClientState> clients;
};

inline ModelParams initial_global_params(const ModelSpec& spec, std::uint64_t master_seed) {
  return init_params(spec, derive_seed(master_seed, StreamPurpose::init));
}

namespace detail {

// Runs job(slot) for every slot in [0, n) on up to `threads` workers.
// Exceptions are captured per slot; the caller decides what to do with them.
inline std::vector<std::exception_ptr> run_slots(std::size_t n, std::size_t threads,
                                                 const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t slot) {
    try {
      job(slot);
    } catch (...) {
      errors[slot] = std::current_exception();
    }
  };
  if (threads <= 1 || n <= 1) {
    for (std::size_t s = 0; s < n; ++s) guarded(s);
    return errors;
  }
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < std::min(threads, n); ++t)
      workers.emplace_back([&] {
        for (std::size_t s = next++; s < n; s = next++) guarded(s);
      });
  }
  return errors;
}

}  // namespace detail

// for t in 1..T: sample K clients, broadcast, local training, aggregate,
// evaluate on the server's test split.
inline FederationResult run_federation(const FederationConfig& config, const FederationData& data,
                                       const ModelSpec& spec, const RunOptions& options = {}) {
  config.validate();
  if (data.plan.num_clients() != config.num_clients)
    throw ConfigError("partition plan has " + std::to_string(data.plan.num_clients()) + " clients, config expects " +
                      std::to_string(config.num_clients));
  validate_plan(data.plan, data.train.size());
  if (const Shape image = preprocessed_shape(data.preprocess, geometry_of(data.train)); image != spec.input_shape)
    throw SpecError("model input " + shape_string(spec.input_shape) + " does not match preprocessed images " +
                    shape_string(image));

  FederationResult result;
  for (std::size_t c = 0; c < config.num_clients; ++c) result.clients.push_back({c, data.plan.clients[c], {}});

  const TrainingContext ctx{spec, data.train, data.preprocess, data.stats};
  ModelParams global = initial_global_params(spec, config.seed);

  for (std::size_t t = 1; t <= config.rounds; ++t) {
    Rng sampler = make_stream(config.seed, StreamPurpose::sampling, t);
    const auto sampled = sample_clients(config.num_clients, config.clients_per_round, sampler);

    std::vector<std::optional<LocalResult>> local(sampled.size());
    const auto errors = detail::run_slots(sampled.size(), options.threads, [&](std::size_t slot) {
      const auto& client = result.clients[sampled[slot]];
      Rng rng = make_stream(config.seed, StreamPurpose::local_train, t, client.id);
      local[slot] = local_train(client, global, config, ctx, rng);
    });
    for (std::size_t slot = 0; slot < sampled.size(); ++slot) {
      if (!errors[slot]) continue;
      try {
        std::rethrow_exception(errors[slot]);
      } catch (const std::exception& e) {
        throw ProtocolError("round " + std::to_string(t) + ": client " + std::to_string(sampled[slot]) +
                            " failed: " + e.what());
      }
    }

    RoundRecord rec;
    rec.round = t;
    rec.sampled_clients = sampled;
    std::vector<ClientUpdate> updates;
    updates.reserve(sampled.size());
    for (std::size_t slot = 0; slot < sampled.size(); ++slot) {
      auto& client = result.clients[sampled[slot]];
      client.last = local[slot]->stats;
      rec.client_samples.push_back(client.samples());
      rec.client_train_loss.push_back(client.last.loss);
      rec.client_train_acc.push_back(client.last.accuracy);
      updates.push_back({client.samples(), std::move(local[slot]->params)});
    }
    global = aggregate(updates, config.weighting);

    Rng crop_rng = make_stream(config.seed, StreamPurpose::eval_crop, t);
    const auto eval = evaluate(spec, global, data.test, data.preprocess, data.stats, 256, &crop_rng);
    rec.global_test_loss = eval.loss;
    rec.global_test_acc = eval.accuracy;
    if (options.on_round) options.on_round(rec);
    result.rounds.push_back(std::move(rec));
  }
  result.final_params = std::move(global);
  return result;
}

}  // namespace fedsim
