// SPDX-License-Identifier: Apache-2.0
//
// Log-Mel spectrogram front end and clip segmentation.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "fedaudio/audio_io.hpp"
#include "fedaudio/error.hpp"
#include "fedaudio/matrix.hpp"

namespace fedaudio {

struct FeatureConfig {
  std::size_t frame_length = 1024;
  double hop_ms = 10.0;
  std::size_t n_mels = 128;
  double log_floor = 1e-6;

  void validate() const {
    require(frame_length >= 2, ErrorCode::InvalidArgument, "frame_length must be >= 2");
    require(hop_ms > 0.0, ErrorCode::InvalidArgument, "hop_ms must be > 0");
    require(n_mels >= 1, ErrorCode::InvalidArgument, "n_mels must be >= 1");
    require(log_floor > 0.0, ErrorCode::InvalidArgument, "log_floor must be > 0");
  }

  std::size_t hop_samples(std::uint32_t sample_rate) const {
    const auto hop = static_cast<std::size_t>(std::llround(hop_ms * sample_rate / 1000.0));
    require(hop >= 1, ErrorCode::InvalidArgument, "hop rounds to zero samples");
    return hop;
  }
};

inline std::vector<double> hamming_window(std::size_t n) {
  require(n >= 2, ErrorCode::InvalidLength, "window length must be >= 2");
  std::vector<double> w(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t k = 0; k < n; ++k)
    w[k] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / denom);
  return w;
}

/// Radix-2 real-input power spectrum with a precomputed twiddle table.
class PowerSpectrum {
 public:
  explicit PowerSpectrum(std::size_t n) : n_(n) {
    if (n < 2 || !std::has_single_bit(n))
      fail(ErrorCode::BadFrameLength,
           "frame length " + std::to_string(n) + " is not a power of two >= 2");
    twiddle_.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k)
      twiddle_[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) /
                                        static_cast<double>(n));
    buf_.resize(n);
  }

  std::size_t size() const noexcept { return n_; }

  /// |X[k]|^2 for k in [0, N/2]. Not thread-safe: uses an internal buffer.
  std::vector<double> operator()(std::span<const double> frame) {
    if (frame.size() != n_)
      fail(ErrorCode::BadFrameLength, "frame length " + std::to_string(frame.size()) +
                                          " differs from transform size " + std::to_string(n_));
    std::copy(frame.begin(), frame.end(), buf_.begin());
    transform();
    std::vector<double> out(n_ / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::norm(buf_[k]);
    return out;
  }

 private:
  void transform() {
    auto& a = buf_;
    for (std::size_t i = 1, j = 0; i < n_; ++i) {
      std::size_t bit = n_ >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t half = len / 2;
      const std::size_t stride = n_ / len;
      for (std::size_t i = 0; i < n_; i += len) {
        for (std::size_t k = 0; k < half; ++k) {
          const auto u = a[i + k];
          const auto v = a[i + k + half] * twiddle_[k * stride];
          a[i + k] = u + v;
          a[i + k + half] = u - v;
        }
      }
    }
  }

  std::size_t n_;
  std::vector<std::complex<double>> twiddle_;
  std::vector<std::complex<double>> buf_;
};

/// One-sided power spectrum |X[k]|^2, k in [0, N/2], of a real frame whose
/// length is a power of two.
inline std::vector<double> power_spectrum(std::span<const double> frame) {
  PowerSpectrum ps(frame.size());
  return ps(frame);
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters, unnormalized, with centres equally spaced on the HTK
/// mel scale between 0 Hz and Nyquist. Rows are filters, columns FFT bins.
/// Fails with TooManyMels instead of emitting a filter that no FFT bin
/// reaches.
inline Matrix mel_filterbank(std::size_t n_mels, std::size_t n_fft, std::uint32_t sample_rate) {
  require(n_mels >= 1, ErrorCode::InvalidArgument, "n_mels must be >= 1");
  require(n_fft >= 2, ErrorCode::InvalidArgument, "n_fft must be >= 2");
  require(sample_rate > 0, ErrorCode::InvalidArgument, "sample_rate must be > 0");
  const std::size_t n_bins = n_fft / 2 + 1;
  const double nyquist = 0.5 * sample_rate;
  const double mel_max = hz_to_mel(nyquist);

  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));

  Matrix fb(n_mels, n_bins);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    bool any = false;
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > lo && f < hi) w = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      if (w > 0.0) {
        fb(m, k) = w;
        any = true;
      }
    }
    if (!any)
      fail(ErrorCode::TooManyMels,
           "mel filter " + std::to_string(m) + " covers no FFT bin (n_mels=" +
               std::to_string(n_mels) + ", n_fft=" + std::to_string(n_fft) +
               ", rate=" + std::to_string(sample_rate) + ")");
  }
  return fb;
}

/// Precomputed window and filterbank for one (config, sample rate) pair.
/// Immutable after construction, so one instance can be shared across
/// threads.
class MelExtractor {
 public:
  MelExtractor(const FeatureConfig& cfg, std::uint32_t sample_rate)
      : cfg_(cfg), sample_rate_(sample_rate) {
    cfg_.validate();
    require(sample_rate > 0, ErrorCode::InvalidArgument, "sample_rate must be > 0");
    if (!std::has_single_bit(cfg_.frame_length))
      fail(ErrorCode::BadFrameLength, "frame_length must be a power of two");
    hop_ = cfg_.hop_samples(sample_rate);
    window_ = hamming_window(cfg_.frame_length);
    filters_ = mel_filterbank(cfg_.n_mels, cfg_.frame_length, sample_rate);
    support_.resize(cfg_.n_mels);
    for (std::size_t m = 0; m < cfg_.n_mels; ++m) {
      auto row = filters_.row(m);
      const auto first = std::find_if(row.begin(), row.end(), [](double w) { return w > 0; });
      const auto last = std::find_if(row.rbegin(), row.rend(), [](double w) { return w > 0; });
      support_[m] = {static_cast<std::size_t>(first - row.begin()),
                     static_cast<std::size_t>(row.rend() - last)};
    }
  }

  std::size_t hop() const noexcept { return hop_; }
  const Matrix& filterbank() const noexcept { return filters_; }

  std::size_t frame_count(std::size_t n_samples) const {
    if (n_samples < cfg_.frame_length) return 0;
    return (n_samples - cfg_.frame_length) / hop_ + 1;
  }

  FeatureMatrix operator()(const AudioClip& clip) const {
    require(clip.sample_rate == sample_rate_, ErrorCode::InvalidArgument,
            "clip sample rate differs from extractor rate");
    if (clip.size() < cfg_.frame_length)
      fail(ErrorCode::ClipTooShort, "clip has " + std::to_string(clip.size()) +
                                        " samples, frame needs " +
                                        std::to_string(cfg_.frame_length));
    const std::size_t frames = frame_count(clip.size());
    FeatureMatrix out(frames, cfg_.n_mels);
    std::vector<double> frame(cfg_.frame_length);
    PowerSpectrum spectrum(cfg_.frame_length);
    for (std::size_t t = 0; t < frames; ++t) {
      const std::size_t start = t * hop_;
      for (std::size_t i = 0; i < frame.size(); ++i)
        frame[i] = clip.samples[start + i] * window_[i];
      const auto power = spectrum(frame);
      for (std::size_t m = 0; m < cfg_.n_mels; ++m) {
        double e = 0.0;
        for (std::size_t k = support_[m].first; k < support_[m].second; ++k)
          e += filters_(m, k) * power[k];
        out(t, m) = std::log(e + cfg_.log_floor);
      }
    }
    return out;
  }

 private:
  FeatureConfig cfg_;
  std::uint32_t sample_rate_;
  std::size_t hop_ = 0;
  std::vector<double> window_;
  Matrix filters_;
  std::vector<std::pair<std::size_t, std::size_t>> support_;
};

inline FeatureMatrix extract_mel(const AudioClip& clip, const FeatureConfig& cfg) {
  return MelExtractor(cfg, clip.sample_rate)(clip);
}

/// Splits a clip into fixed-length windows advancing by
/// (seg_seconds - overlap_seconds); a trailing partial window is dropped.
inline std::vector<AudioClip> segment_clip(const AudioClip& clip, double seg_seconds,
                                           double overlap_seconds) {
  require(clip.sample_rate > 0, ErrorCode::InvalidArgument, "sample_rate must be > 0");
  require(overlap_seconds >= 0.0 && overlap_seconds < seg_seconds, ErrorCode::InvalidArgument,
          "overlap must satisfy 0 <= overlap < segment length");
  const double rate = clip.sample_rate;
  const auto seg = static_cast<std::size_t>(std::llround(seg_seconds * rate));
  const auto step = static_cast<std::size_t>(std::llround((seg_seconds - overlap_seconds) * rate));
  require(seg >= 1 && step >= 1, ErrorCode::InvalidArgument, "segment rounds to zero samples");
  if (seg > clip.size())
    fail(ErrorCode::SegmentLongerThanClip, "segment of " + std::to_string(seg) +
                                               " samples exceeds clip of " +
                                               std::to_string(clip.size()));
  const std::size_t count = (clip.size() - seg) / step + 1;
  std::vector<AudioClip> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto first = clip.samples.begin() + static_cast<std::ptrdiff_t>(i * step);
    out.push_back({std::vector<double>(first, first + static_cast<std::ptrdiff_t>(seg)),
                   clip.sample_rate});
  }
  return out;
}

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct Normalized {
  std::vector<FeatureMatrix> train;
  std::vector<FeatureMatrix> others;
  NormStats stats;
};

/// Per-dimension statistics over every training frame.
inline NormStats compute_norm_stats(std::span<const FeatureMatrix> train) {
  if (train.empty()) fail(ErrorCode::EmptyTrainingSet, "no training matrices to normalize");
  const std::size_t dims = train.front().cols();
  std::vector<double> sum(dims, 0.0), lo(dims, INFINITY), hi(dims, -INFINITY);
  std::size_t count = 0;
  for (const auto& m : train) {
    require(m.cols() == dims, ErrorCode::DimensionMismatch, "training matrices differ in dims");
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t d = 0; d < dims; ++d) {
        const double v = m(r, d);
        sum[d] += v;
        lo[d] = std::min(lo[d], v);
        hi[d] = std::max(hi[d], v);
      }
    count += m.rows();
  }
  if (count == 0) fail(ErrorCode::EmptyTrainingSet, "training matrices hold no frames");
  NormStats stats{std::vector<double>(dims), std::vector<double>(dims)};
  for (std::size_t d = 0; d < dims; ++d)
    stats.mean[d] = lo[d] == hi[d] ? lo[d] : sum[d] / static_cast<double>(count);
  std::vector<double> sq(dims, 0.0);
  for (const auto& m : train)
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t d = 0; d < dims; ++d) {
        const double dv = m(r, d) - stats.mean[d];
        sq[d] += dv * dv;
      }
  for (std::size_t d = 0; d < dims; ++d) stats.std[d] = std::sqrt(sq[d] / static_cast<double>(count));
  return stats;
}

inline FeatureMatrix apply_norm(const FeatureMatrix& m, const NormStats& stats) {
  require(m.cols() == stats.mean.size(), ErrorCode::DimensionMismatch,
          "matrix dims differ from normalization stats");
  FeatureMatrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t d = 0; d < out.cols(); ++d)
      out(r, d) = (out(r, d) - stats.mean[d]) / std::max(stats.std[d], 1e-8);
  return out;
}

/// z-normalizes both lists with statistics taken from `train` only.
inline Normalized znormalize(std::span<const FeatureMatrix> train,
                             std::span<const FeatureMatrix> others) {
  Normalized out;
  out.stats = compute_norm_stats(train);
  out.train.reserve(train.size());
  for (const auto& m : train) out.train.push_back(apply_norm(m, out.stats));
  out.others.reserve(others.size());
  for (const auto& m : others) out.others.push_back(apply_norm(m, out.stats));
  return out;
}

}  // namespace fedaudio
