// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedaudio/error.hpp"

namespace fedaudio {

inline double accuracy(std::span<const std::size_t> predictions,
                       std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size())
    fail(ErrorCode::LengthMismatch, "predictions and labels differ in length");
  if (labels.empty()) fail(ErrorCode::Empty, "no predictions to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Unweighted mean of per-class F1. A class absent from both predictions and
/// labels is left out of the mean; one that appears but is never matched
/// scores 0.
inline double macro_f1(std::span<const std::size_t> predictions,
                       std::span<const std::size_t> labels, std::size_t n_classes) {
  if (predictions.size() != labels.size())
    fail(ErrorCode::LengthMismatch, "predictions and labels differ in length");
  if (labels.empty()) fail(ErrorCode::Empty, "no predictions to score");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < n_classes && predictions[i] < n_classes, ErrorCode::UnknownLabel,
            "class index outside [0, K)");
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++present;
    // 2PR / (P + R) == 2TP / (2TP + FP + FN)
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  return present ? sum / static_cast<double>(present) : 0.0;
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;

  /// "avg. (std.)%", both in percent with two decimals.
  std::string render() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f (%.2f)%%", 100.0 * mean, 100.0 * std);
    return buf;
  }
};

/// Arithmetic mean and sample (n - 1) standard deviation; std is 0 for n = 1.
inline MetricSummary summarize(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::Empty, "no values to summarize");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  return {mean, sd, values.size()};
}

/// Signed difference treatment - baseline (the treatment's std travels with it).
inline double delta_metric(const MetricSummary& baseline, const MetricSummary& treatment) {
  return treatment.mean - baseline.mean;
}

enum class TargetMetric { accuracy, f1 };

struct RoundToTarget {
  double target = 0.0;
  std::optional<std::size_t> rounds;           // 1-indexed; empty if never reached
  std::optional<std::size_t> baseline_rounds;
  std::optional<double> ratio;
  std::size_t total_rounds = 0;                // run length, for the ">R" form

  void set_baseline(std::optional<std::size_t> base) {
    baseline_rounds = base;
    ratio.reset();
    if (rounds && base && *base > 0)
      ratio = static_cast<double>(*rounds) / static_cast<double>(*base);
  }

  /// "910 (1.52×)", "910", or ">5000" when the target was never met.
  std::string render() const {
    if (!rounds) return ">" + std::to_string(total_rounds);
    std::string s = std::to_string(*rounds);
    if (ratio) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), " (%.2f×)", *ratio);
      s += buf;
    }
    return s;
  }
};

/// First round (1-indexed) whose metric reaches `target`.
inline RoundToTarget round_to_target(std::span<const double> per_round_metric, double target) {
  RoundToTarget out;
  out.target = target;
  out.total_rounds = per_round_metric.size();
  for (std::size_t i = 0; i < per_round_metric.size(); ++i)
    if (per_round_metric[i] >= target) {
      out.rounds = i + 1;
      break;
    }
  return out;
}

}  // namespace fedaudio
