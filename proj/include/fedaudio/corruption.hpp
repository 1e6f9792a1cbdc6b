// SPDX-License-Identifier: Apache-2.0
//
// Real-world corruption models: additive white Gaussian noise at a target
// SNR, and class-conditional label flips drawn from a transition matrix
// parameterized by error ratio and error sparsity.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "fedaudio/audio_io.hpp"
#include "fedaudio/error.hpp"
#include "fedaudio/partition.hpp"
#include "fedaudio/rng.hpp"

namespace fedaudio {

struct NoiseSpec {
  double snr_db = 20.0;
  std::uint64_t seed = 0;
};

inline double signal_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

/// Adds i.i.d. N(0, P_s / 10^(snr/10)) noise. The sum is not re-clipped.
inline AudioClip inject_awgn(const AudioClip& clip, const NoiseSpec& spec) {
  require(std::isfinite(spec.snr_db), ErrorCode::InvalidArgument, "snr_db must be finite");
  const double ps = signal_power(clip.samples);
  if (clip.samples.empty() || ps == 0.0)
    fail(ErrorCode::SilentClip, "signal power is zero; SNR is undefined");
  const double sigma = std::sqrt(ps / std::pow(10.0, spec.snr_db / 10.0));
  Rng rng(spec.seed);
  std::normal_distribution<double> noise(0.0, sigma);
  AudioClip out = clip;
  for (double& v : out.samples) v += noise(rng);
  return out;
}

inline double measure_snr(const AudioClip& original, const AudioClip& noisy) {
  require(original.size() == noisy.size() && original.sample_rate == noisy.sample_rate,
          ErrorCode::LengthMismatch, "clips differ in length or sample rate");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double d = noisy.samples[i] - original.samples[i];
    num += original.samples[i] * original.samples[i];
    den += d * d;
  }
  if (den == 0.0) fail(ErrorCode::ZeroNoise, "clips are identical; noise power is zero");
  return 10.0 * std::log10(num / den);
}

/// Row-stochastic K x K matrix; q(i, j) = P(observed j | true i).
class TransitionMatrix {
 public:
  static TransitionMatrix identity(std::size_t k) {
    TransitionMatrix q(k);
    for (std::size_t i = 0; i < k; ++i) q(i, i) = 1.0;
    return q;
  }

  /// Validates the invariants: entries in [0, 1], rows summing to 1 within
  /// 1e-12.
  static TransitionMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    TransitionMatrix q(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == rows.size(), ErrorCode::InvalidArgument, "matrix is not square");
      for (std::size_t j = 0; j < rows.size(); ++j) q(i, j) = rows[i][j];
    }
    q.validate();
    return q;
  }

  std::size_t classes() const noexcept { return k_; }
  double operator()(std::size_t i, std::size_t j) const { return q_[i * k_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return q_[i * k_ + j]; }
  std::span<const double> row(std::size_t i) const { return {q_.data() + i * k_, k_}; }

  void validate() const {
    require(k_ >= 1, ErrorCode::InvalidArgument, "transition matrix has no classes");
    for (std::size_t i = 0; i < k_; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k_; ++j) {
        const double v = (*this)(i, j);
        require(v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument, "entry outside [0, 1]");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= 1e-12, ErrorCode::InvalidArgument,
              "row " + std::to_string(i) + " does not sum to 1");
    }
  }

  friend bool operator==(const TransitionMatrix&, const TransitionMatrix&) = default;

 private:
  explicit TransitionMatrix(std::size_t k) : k_(k), q_(k * k, 0.0) {}

  std::size_t k_ = 0;
  std::vector<double> q_;
};

struct LabelErrorSpec {
  double error_ratio = 0.0;
  double error_sparsity = 0.0;
  std::uint64_t seed = 0;
};

/// Number of zero cells among the K(K-1) off-diagonal entries.
inline std::size_t off_diagonal_zero_budget(std::size_t k, double sparsity) {
  const double cells = static_cast<double>(k * (k - 1));
  return static_cast<std::size_t>(std::llround(sparsity * cells));
}

/// Throws InfeasibleSpec when (k, spec) cannot be realized.
inline void check_label_error_spec(std::size_t k, const LabelErrorSpec& spec) {
  require(k >= 2, ErrorCode::InfeasibleSpec, "label errors need at least 2 classes");
  require(spec.error_ratio >= 0.0 && spec.error_ratio < 1.0, ErrorCode::InfeasibleSpec,
          "error_ratio must lie in [0, 1)");
  require(spec.error_sparsity >= 0.0 && spec.error_sparsity <= 1.0, ErrorCode::InfeasibleSpec,
          "error_sparsity must lie in [0, 1]");
  if (spec.error_ratio == 0.0) return;
  require(spec.error_sparsity < 1.0, ErrorCode::InfeasibleSpec,
          "error_sparsity 1 leaves no off-diagonal cell for a nonzero error_ratio");
  const std::size_t nonzero = k * (k - 1) - off_diagonal_zero_budget(k, spec.error_sparsity);
  require(nonzero >= k, ErrorCode::InfeasibleSpec,
          "sparsity " + std::to_string(spec.error_sparsity) + " leaves " +
              std::to_string(nonzero) + " nonzero off-diagonal cells for " +
              std::to_string(k) + " rows");
}

/// Builds Q with Q_ii = 1 - error_ratio. The nonzero off-diagonal budget
/// K(K-1) - round(sparsity K(K-1)) is spread over rows as evenly as possible
/// (remainder rows picked by a seeded shuffle); within a row the nonzero
/// columns are a seeded random subset and share error_ratio according to a
/// uniform simplex draw. error_ratio = 0 yields the identity.
inline TransitionMatrix gen_transition_matrix(std::size_t k, const LabelErrorSpec& spec) {
  check_label_error_spec(k, spec);
  auto q = TransitionMatrix::identity(k);
  if (spec.error_ratio == 0.0) return q;

  Rng rng(spec.seed);
  const std::size_t nonzero = k * (k - 1) - off_diagonal_zero_budget(k, spec.error_sparsity);
  std::vector<std::size_t> per_row(k, nonzero / k);
  std::vector<std::size_t> rows(k);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  for (std::size_t r = 0; r < nonzero % k; ++r) ++per_row[rows[r]];

  std::exponential_distribution<double> expo(1.0);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) cols.push_back(j);
    std::shuffle(cols.begin(), cols.end(), rng);
    cols.resize(per_row[i]);

    std::vector<double> share(cols.size());
    double total = 0.0;
    for (auto& s : share) {
      do s = expo(rng);
      while (s <= 0.0);
      total += s;
    }
    q(i, i) = 1.0 - spec.error_ratio;
    for (std::size_t n = 0; n < cols.size(); ++n) {
      double v = spec.error_ratio * share[n] / total;
      // A zero here would silently change the realized sparsity.
      if (v == 0.0) v = std::numeric_limits<double>::min();
      q(i, cols[n]) = v;
    }
  }
  q.validate();
  return q;
}

struct QStats {
  std::vector<double> error_ratio;  // per row, 1 - Q_ii
  double error_sparsity = 0.0;      // exact zeros among off-diagonal cells
};

inline QStats q_stats(const TransitionMatrix& q) {
  const std::size_t k = q.classes();
  QStats s;
  s.error_ratio.resize(k);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < k; ++i) {
    s.error_ratio[i] = 1.0 - q(i, i);
    for (std::size_t j = 0; j < k; ++j)
      if (i != j && q(i, j) == 0.0) ++zeros;
  }
  s.error_sparsity = k > 1 ? static_cast<double>(zeros) / static_cast<double>(k * (k - 1)) : 1.0;
  return s;
}

/// Resamples every training label from row Q_y. Each client draws from its
/// own stream derived from (seed, client id), consumed in example order, so
/// results do not depend on the order clients are processed. Features,
/// membership and the test set are untouched.
inline FederatedDataset apply_label_errors(const FederatedDataset& dataset,
                                           const TransitionMatrix& q, std::uint64_t seed) {
  if (q.classes() != dataset.n_classes)
    fail(ErrorCode::ClassCountMismatch,
         "transition matrix has " + std::to_string(q.classes()) + " classes, dataset has " +
             std::to_string(dataset.n_classes));
  FederatedDataset out = dataset;
  for (auto& [id, shard] : out.clients) {
    Rng rng(derive_seed(seed, "labels", id));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& ex : shard) {
      require(ex.label < q.classes(), ErrorCode::UnknownLabel, "label outside vocabulary");
      const auto row = q.row(ex.label);
      const double u = unit(rng);
      double acc = 0.0;
      std::size_t pick = ex.label;
      // Inverse CDF; falls back to the last positive column on rounding.
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (row[j] <= 0.0) continue;
        pick = j;
        acc += row[j];
        if (u < acc) break;
      }
      ex.label = pick;
    }
  }
  return out;
}

}  // namespace fedaudio
