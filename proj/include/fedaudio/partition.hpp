// SPDX-License-Identifier: Apache-2.0
//
// Non-IID client shards: natural keys (speaker / actor ID) or Dirichlet
// label skew. Assignments depend only on labels and keys, never on features.
#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedaudio/error.hpp"
#include "fedaudio/matrix.hpp"
#include "fedaudio/rng.hpp"

namespace fedaudio {

struct Example {
  FeatureMatrix features;
  std::size_t label = 0;
};

struct KeyedExample {
  FeatureMatrix features;
  std::size_t label = 0;
  std::string key;
};

/// Client id -> shard. std::map keeps iteration sorted by id.
using ClientShards = std::map<std::string, std::vector<Example>>;

struct FederatedDataset {
  ClientShards clients;
  std::vector<Example> test_set;
  std::size_t n_classes = 0;

  std::size_t train_size() const {
    std::size_t n = 0;
    for (const auto& [id, shard] : clients) n += shard.size();
    return n;
  }

  std::vector<std::string> client_ids() const {
    std::vector<std::string> ids;
    ids.reserve(clients.size());
    for (const auto& [id, shard] : clients) ids.push_back(id);
    return ids;
  }

  /// Checks the shard invariants: labels < K and no empty client.
  void validate() const {
    require(n_classes >= 1, ErrorCode::InvalidArgument, "dataset has no classes");
    for (const auto& [id, shard] : clients) {
      require(!shard.empty(), ErrorCode::InvalidArgument, "client " + id + " has no examples");
      for (const auto& ex : shard)
        require(ex.label < n_classes, ErrorCode::UnknownLabel,
                "client " + id + " holds label " + std::to_string(ex.label));
    }
    for (const auto& ex : test_set)
      require(ex.label < n_classes, ErrorCode::UnknownLabel,
              "test set holds label " + std::to_string(ex.label));
  }
};

struct DirichletSpec {
  std::size_t n_clients = 50;
  double alpha = 0.5;
  std::size_t min_per_client = 1;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 100;

  void validate() const {
    require(n_clients >= 1, ErrorCode::InvalidArgument, "n_clients must be >= 1");
    require(alpha > 0.0 && std::isfinite(alpha), ErrorCode::InvalidArgument,
            "alpha must be a positive finite real");
  }
};

inline std::string dirichlet_client_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "client_%04zu", i);
  return buf;
}

/// Groups example indices by key.
inline std::map<std::string, std::vector<std::size_t>> assign_by_key(
    std::span<const std::string> keys) {
  if (keys.empty()) fail(ErrorCode::EmptyInput, "no examples to partition");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    require(!keys[i].empty(), ErrorCode::InvalidArgument,
            "example " + std::to_string(i) + " has an empty key");
    groups[keys[i]].push_back(i);
  }
  return groups;
}

inline ClientShards partition_by_key(std::vector<KeyedExample> examples) {
  std::vector<std::string> keys;
  keys.reserve(examples.size());
  for (const auto& ex : examples) keys.push_back(ex.key);
  ClientShards clients;
  for (auto& [key, idx] : assign_by_key(keys)) {
    auto& shard = clients[key];
    shard.reserve(idx.size());
    for (std::size_t i : idx)
      shard.push_back({std::move(examples[i].features), examples[i].label});
  }
  return clients;
}

/// Draws a point on the simplex from Dirichlet(alpha * 1) by normalizing
/// independent Gamma(alpha, 1) variates.
inline std::vector<double> sample_symmetric_dirichlet(std::size_t n, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(n);
  double total = 0.0;
  // Small alpha can underflow every draw to zero; redraw in that case.
  while (total <= 0.0) {
    total = 0.0;
    for (auto& v : p) {
      v = gamma(rng);
      total += v;
    }
  }
  for (auto& v : p) v /= total;
  return p;
}

/// Label-skew Dirichlet assignment: for each class independently,
/// p ~ Dir(alpha) over clients and every class example goes to client
/// j with probability p_j. Retries with a fresh sub-seed until every client
/// holds at least min_per_client examples. Returns per-client index lists.
inline std::vector<std::vector<std::size_t>> dirichlet_assign(std::span<const std::size_t> labels,
                                                              const DirichletSpec& spec) {
  spec.validate();
  if (labels.empty()) fail(ErrorCode::EmptyInput, "no examples to partition");
  if (labels.size() < spec.n_clients * spec.min_per_client)
    fail(ErrorCode::InfeasibleSpec, std::to_string(labels.size()) + " examples cannot give " +
                                        std::to_string(spec.n_clients) + " clients " +
                                        std::to_string(spec.min_per_client) + " each");
  std::size_t n_classes = 0;
  for (std::size_t y : labels) n_classes = std::max(n_classes, y + 1);
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  for (std::size_t attempt = 0; attempt < spec.max_attempts; ++attempt) {
    Rng rng(derive_seed(spec.seed, "dirichlet", attempt));
    std::vector<std::vector<std::size_t>> shards(spec.n_clients);
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      const auto p = sample_symmetric_dirichlet(spec.n_clients, spec.alpha, rng);
      std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
      for (std::size_t i : members) shards[pick(rng)].push_back(i);
    }
    bool ok = true;
    for (const auto& s : shards) ok = ok && s.size() >= spec.min_per_client;
    if (ok) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  fail(ErrorCode::RetryExhausted, "no assignment met min_per_client after " +
                                      std::to_string(spec.max_attempts) + " attempts");
}

inline ClientShards dirichlet_partition(std::vector<Example> examples, const DirichletSpec& spec) {
  std::vector<std::size_t> labels;
  labels.reserve(examples.size());
  for (const auto& ex : examples) labels.push_back(ex.label);
  const auto shards = dirichlet_assign(labels, spec);
  ClientShards clients;
  for (std::size_t c = 0; c < shards.size(); ++c) {
    auto& shard = clients[dirichlet_client_id(c)];
    shard.reserve(shards[c].size());
    for (std::size_t i : shards[c]) shard.push_back(std::move(examples[i]));
  }
  return clients;
}

/// Per-client class counts, row order = sorted client id.
inline std::vector<std::vector<std::size_t>> class_counts(const ClientShards& clients,
                                                          std::size_t n_classes) {
  std::vector<std::vector<std::size_t>> counts;
  for (const auto& [id, shard] : clients) {
    std::vector<std::size_t> row(n_classes, 0);
    for (const auto& ex : shard) {
      require(ex.label < n_classes, ErrorCode::UnknownLabel, "label outside vocabulary");
      ++row[ex.label];
    }
    counts.push_back(std::move(row));
  }
  return counts;
}

/// Shannon entropy (nats) of a count vector.
inline double label_entropy(std::span<const std::size_t> counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts)
    if (c) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
  return h;
}

inline double mean_client_entropy(const ClientShards& clients, std::size_t n_classes) {
  const auto counts = class_counts(clients, n_classes);
  if (counts.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& row : counts) sum += label_entropy(row);
  return sum / static_cast<double>(counts.size());
}

}  // namespace fedaudio
