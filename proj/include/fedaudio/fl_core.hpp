// SPDX-License-Identifier: Apache-2.0
//
// The federation loop. Rounds run sequentially; within a round the sampled
// clients train on independent workers from an immutable snapshot of the
// global parameters, and the server reduces their results single-threaded in
// ascending client-id order. Every RNG stream is derived up front from
// (master_seed, round[, client]), so results are independent of scheduling.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "fedaudio/error.hpp"
#include "fedaudio/metrics.hpp"
#include "fedaudio/model.hpp"
#include "fedaudio/partition.hpp"
#include "fedaudio/rng.hpp"

namespace fedaudio {

enum class ServerOptimizer { fedavg, fedopt };

struct FedConfig {
  ServerOptimizer optimizer = ServerOptimizer::fedavg;
  std::size_t rounds = 100;
  double sample_ratio = 0.1;
  double client_lr = 0.1;
  double server_lr = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs_per_round = 1;
  std::size_t batch_size = 16;
  std::uint64_t master_seed = 0;

  void validate() const {
    require(rounds >= 1, ErrorCode::InvalidArgument, "rounds must be >= 1");
    require(sample_ratio > 0.0 && sample_ratio <= 1.0, ErrorCode::InvalidArgument,
            "sample_ratio must lie in (0, 1]");
    require(client_lr >= 0.0 && server_lr >= 0.0, ErrorCode::InvalidArgument,
            "learning rates must be >= 0");
    require(epochs_per_round >= 1 && batch_size >= 1, ErrorCode::InvalidArgument,
            "epochs_per_round and batch_size must be >= 1");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 &&
                adam_eps > 0.0,
            ErrorCode::InvalidArgument, "Adam betas must lie in [0, 1) and eps > 0");
  }
};

struct ServerState {
  ParamVector global;
  ParamVector adam_m;
  ParamVector adam_v;
  std::size_t step_count = 0;

  static ServerState fresh(ParamVector params) {
    ServerState s;
    s.adam_m = params.zeros_like();
    s.adam_v = params.zeros_like();
    s.global = std::move(params);
    return s;
  }
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::string> sampled_clients;
  double mean_train_loss = 0.0;
  double test_accuracy = 0.0;
  double test_macro_f1 = 0.0;
};

/// Number of clients drawn per round: max(1, round(ratio * n)), with
/// halves rounded away from zero.
inline std::size_t sampled_count(std::size_t n, double ratio) {
  const auto m = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(m, 1, n);
}

/// Uniform draw without replacement; output keeps the input (sorted) order.
inline std::vector<std::string> sample_clients(std::span<const std::string> client_ids,
                                               double ratio, Rng& round_rng) {
  require(!client_ids.empty(), ErrorCode::EmptyInput, "no clients to sample from");
  require(ratio > 0.0 && ratio <= 1.0, ErrorCode::InvalidArgument,
          "sample ratio must lie in (0, 1]");
  const std::size_t m = sampled_count(client_ids.size(), ratio);
  std::vector<std::string> out;
  out.reserve(m);
  std::sample(client_ids.begin(), client_ids.end(), std::back_inserter(out), m, round_rng);
  return out;
}

struct ClientUpdate {
  ParamVector params;
  std::size_t sample_count = 0;
};

/// Sample-count weighted mean, sum_i (n_i / N) p_i, reduced in list order.
inline ParamVector fedavg_aggregate(std::span<const ClientUpdate> updates) {
  require(!updates.empty(), ErrorCode::EmptyInput, "nothing to aggregate");
  double total = 0.0;
  for (const auto& u : updates) {
    check_same_layout(updates.front().params, u.params);
    require(u.sample_count >= 1, ErrorCode::InvalidArgument, "client sample count must be >= 1");
    total += static_cast<double>(u.sample_count);
  }
  ParamVector out = updates.front().params.zeros_like();
  for (const auto& u : updates) {
    const double w = static_cast<double>(u.sample_count) / total;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += w * u.params.values[i];
  }
  return out;
}

/// One server Adam step on the pseudo-gradient g = global - aggregated.
inline ServerState fedopt_step(ServerState state, const ParamVector& aggregated,
                               const FedConfig& cfg) {
  check_same_layout(state.global, aggregated);
  check_same_layout(state.global, state.adam_m);
  check_same_layout(state.global, state.adam_v);
  ++state.step_count;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  auto& g = state.global.values;
  auto& m = state.adam_m.values;
  auto& v = state.adam_v.values;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double pseudo = g[i] - aggregated.values[i];
    m[i] = b1 * m[i] + (1.0 - b1) * pseudo;
    v[i] = b2 * v[i] + (1.0 - b2) * pseudo * pseudo;
    const double step = cfg.server_lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    g[i] -= step;
  }
  return state;
}

/// Worker cap from FEDAUDIO_SIM_WORKERS, else the hardware concurrency.
inline std::size_t default_workers() {
  if (const char* env = std::getenv("FEDAUDIO_SIM_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `workers` threads. The first
/// exception thrown by any job is rethrown on the calling thread.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& job) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  pool.clear();
  if (error) std::rethrow_exception(error);
}

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

inline EvalResult evaluate(const ParamVector& params, const ModelArch& arch,
                           std::span<const Example> test_set, std::size_t workers = 1) {
  if (test_set.empty()) fail(ErrorCode::EmptyTestSet, "no test examples to evaluate");
  std::vector<std::size_t> pred(test_set.size()), labels(test_set.size());
  const std::size_t chunk = 64;
  const std::size_t chunks = (test_set.size() + chunk - 1) / chunk;
  parallel_for(chunks, workers, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(test_set.size(), lo + chunk);
    const auto part = predict(params, arch, test_set.subspan(lo, hi - lo));
    std::copy(part.begin(), part.end(), pred.begin() + static_cast<std::ptrdiff_t>(lo));
  });
  for (std::size_t i = 0; i < test_set.size(); ++i) labels[i] = test_set[i].label;
  return {accuracy(pred, labels), macro_f1(pred, labels, arch.n_classes)};
}

inline std::uint64_t round_seed(std::uint64_t master_seed, std::size_t round) {
  return derive_seed(master_seed, "round", round);
}

inline std::uint64_t client_seed(std::uint64_t master_seed, std::size_t round,
                                 const std::string& client) {
  return derive_seed(master_seed, "client", round, client);
}

struct FederationResult {
  std::vector<RoundRecord> records;
  ParamVector final_params;
};

using RoundCallback = std::function<void(const RoundRecord&)>;

/// Starts from `initial` and runs cfg.rounds rounds; `on_round` sees every
/// record as soon as it is produced.
inline FederationResult run_federation(const FederatedDataset& dataset, const ModelArch& arch,
                                       const FedConfig& cfg, ParamVector initial,
                                       const RoundCallback& on_round = {},
                                       std::size_t workers = default_workers()) {
  cfg.validate();
  dataset.validate();
  require(!dataset.clients.empty(), ErrorCode::EmptyInput, "dataset has no clients");
  if (dataset.test_set.empty()) fail(ErrorCode::EmptyTestSet, "dataset has no test set");
  require(arch.n_classes == dataset.n_classes, ErrorCode::ClassCountMismatch,
          "model and dataset disagree on the class count");
  check_same_layout(initial, ParamVector{initial.values, param_layout(arch)});

  const auto ids = dataset.client_ids();
  ServerState state = ServerState::fresh(std::move(initial));
  FederationResult result;
  result.records.reserve(cfg.rounds);

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    Rng round_rng(round_seed(cfg.master_seed, r));
    const auto sampled = sample_clients(ids, cfg.sample_ratio, round_rng);

    std::vector<ClientUpdate> updates(sampled.size());
    std::vector<double> losses(sampled.size());
    const ParamVector& snapshot = state.global;
    parallel_for(sampled.size(), workers, [&](std::size_t i) {
      const auto& shard = dataset.clients.at(sampled[i]);
      SgdOptions opt{cfg.client_lr, cfg.epochs_per_round, cfg.batch_size,
                     client_seed(cfg.master_seed, r, sampled[i]), 0};
      auto local = local_train(snapshot, arch, shard, opt);
      updates[i] = {std::move(local.params), shard.size()};
      losses[i] = local.mean_loss;
    });

    double loss = 0.0, weight = 0.0;
    for (std::size_t i = 0; i < updates.size(); ++i) {
      loss += losses[i] * static_cast<double>(updates[i].sample_count);
      weight += static_cast<double>(updates[i].sample_count);
    }
    ParamVector aggregated = fedavg_aggregate(updates);
    if (cfg.optimizer == ServerOptimizer::fedopt) {
      state = fedopt_step(std::move(state), aggregated, cfg);
    } else {
      state.global = std::move(aggregated);
    }

    const auto eval = evaluate(state.global, arch, dataset.test_set, workers);
    RoundRecord rec{r, sampled, loss / weight, eval.accuracy, eval.macro_f1};
    if (on_round) on_round(rec);
    result.records.push_back(std::move(rec));
  }
  result.final_params = std::move(state.global);
  return result;
}

inline FederationResult run_federation(const FederatedDataset& dataset, const ModelArch& arch,
                                       const FedConfig& cfg, std::uint64_t init_seed,
                                       const RoundCallback& on_round = {},
                                       std::size_t workers = default_workers()) {
  return run_federation(dataset, arch, cfg, init_params(arch, init_seed), on_round, workers);
}

}  // namespace fedaudio
