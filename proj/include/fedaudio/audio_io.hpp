// SPDX-License-Identifier: Apache-2.0
//
// Raw audio loading, deterministic synthetic corpora and ingestion of
// precomputed feature files.
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedaudio/error.hpp"
#include "fedaudio/matrix.hpp"
#include "fedaudio/rng.hpp"

namespace fedaudio {

struct AudioClip {
  std::vector<double> samples;
  std::uint32_t sample_rate = 0;

  std::size_t size() const noexcept { return samples.size(); }
  double duration_seconds() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }

  friend bool operator==(const AudioClip&, const AudioClip&) = default;
};

struct LabeledClip {
  AudioClip clip;
  std::size_t label = 0;
  std::string speaker_id;
};

/// Desk-scale stand-in for a speech corpus. Class c places its tones in
/// [300 + 400c, 500 + 400c] Hz; every speaker owns a low-frequency voice
/// fundamental and a pitch offset that shifts its class tones, so grouping
/// by speaker yields non-IID shards.
struct SynthCorpusSpec {
  std::size_t n_classes = 4;
  std::size_t n_speakers = 20;
  std::size_t clips_per_speaker_per_class = 5;
  double clip_seconds = 1.0;
  std::uint32_t sample_rate = 16000;
  std::uint64_t seed = 0;

  // Power of the class tones relative to the speaker voice, in dB.
  double tone_level_db = -30.0;
  double max_pitch_offset_hz = 50.0;
  std::size_t tones_per_clip = 3;
  double dither_std = 1e-5;

  void validate() const {
    require(n_classes >= 1 && n_speakers >= 1 && clips_per_speaker_per_class >= 1,
            ErrorCode::InvalidArgument, "synthetic corpus counts must be >= 1");
    require(clip_seconds > 0.0, ErrorCode::InvalidArgument, "clip_seconds must be > 0");
    require(sample_rate > 0, ErrorCode::InvalidArgument, "sample_rate must be > 0");
    require(tones_per_clip >= 1, ErrorCode::InvalidArgument, "tones_per_clip must be >= 1");
    require(dither_std >= 0.0, ErrorCode::InvalidArgument, "dither_std must be >= 0");
    const double top = 500.0 + 400.0 * static_cast<double>(n_classes - 1) + max_pitch_offset_hz;
    require(top < 0.5 * sample_rate, ErrorCode::InvalidArgument,
            "class bands exceed the Nyquist frequency for this sample rate");
  }
};

namespace detail {

inline std::uint32_t read_u32le(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline std::uint16_t read_u16le(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u16le(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string format_real(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace detail

/// Parses an in-memory RIFF/WAVE image. Accepts 16-bit PCM mono only.
inline AudioClip parse_wav(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) {
    if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "RIFF"))
      fail(ErrorCode::TruncatedFile, "RIFF header cut short");
    fail(ErrorCode::NotWav, "file too small to be RIFF/WAVE");
  }
  auto tag_is = [&](std::size_t at, const char* tag) {
    return std::equal(bytes.begin() + at, bytes.begin() + at + 4, tag);
  };
  if (!tag_is(0, "RIFF") || !tag_is(8, "WAVE")) fail(ErrorCode::NotWav, "bad RIFF/WAVE magic");

  bool have_fmt = false;
  std::uint32_t sample_rate = 0;
  std::size_t pos = 12;
  while (true) {
    if (pos + 8 > bytes.size()) {
      fail(ErrorCode::TruncatedFile, have_fmt ? "missing data chunk" : "missing fmt chunk");
    }
    const std::uint32_t chunk_size = detail::read_u32le(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (tag_is(pos, "fmt ")) {
      if (chunk_size < 16 || body + 16 > bytes.size())
        fail(ErrorCode::TruncatedFile, "fmt chunk cut short");
      const std::uint16_t format = detail::read_u16le(bytes, body);
      const std::uint16_t channels = detail::read_u16le(bytes, body + 2);
      sample_rate = detail::read_u32le(bytes, body + 4);
      const std::uint16_t bits = detail::read_u16le(bytes, body + 14);
      if (format != 1)
        fail(ErrorCode::UnsupportedEncoding,
             "audio format " + std::to_string(format) + " (only PCM = 1 is supported)");
      if (channels != 1)
        fail(ErrorCode::UnsupportedEncoding, std::to_string(channels) + " channels (mono only)");
      if (bits != 16)
        fail(ErrorCode::UnsupportedEncoding, std::to_string(bits) + "-bit samples (16-bit only)");
      if (sample_rate == 0) fail(ErrorCode::NotWav, "sample rate of 0 Hz");
      have_fmt = true;
    } else if (tag_is(pos, "data")) {
      if (!have_fmt) fail(ErrorCode::NotWav, "data chunk precedes fmt chunk");
      if (body + chunk_size > bytes.size() || chunk_size % 2 != 0)
        fail(ErrorCode::TruncatedFile, "data chunk shorter than declared");
      AudioClip clip;
      clip.sample_rate = sample_rate;
      clip.samples.resize(chunk_size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(detail::read_u16le(bytes, body + 2 * i));
        clip.samples[i] = static_cast<double>(raw) / 32768.0;
      }
      return clip;
    }
    const std::size_t next = body + static_cast<std::size_t>(chunk_size) + (chunk_size & 1U);
    if (next <= pos || next > bytes.size())
      fail(ErrorCode::TruncatedFile, "chunk extends past end of file");
    pos = next;
  }
}

inline AudioClip load_wav(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_wav(bytes);
}

/// Encodes a clip as 16-bit PCM mono. Samples outside [-1, 1) saturate, as
/// the format cannot represent them.
inline std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
  require(clip.sample_rate > 0, ErrorCode::InvalidArgument, "sample_rate must be > 0");
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::put_u32le(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_u32le(out, 16);
  detail::put_u16le(out, 1);
  detail::put_u16le(out, 1);
  detail::put_u32le(out, clip.sample_rate);
  detail::put_u32le(out, clip.sample_rate * 2);
  detail::put_u16le(out, 2);
  detail::put_u16le(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::put_u32le(out, data_bytes);
  for (double s : clip.samples) {
    const double scaled = std::round(s * 32768.0);
    const auto q = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    detail::put_u16le(out, static_cast<std::uint16_t>(q));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto bytes = encode_wav(clip);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline std::string speaker_key(std::size_t speaker) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "spk%04zu", speaker);
  return buf;
}

/// Generates n_classes x n_speakers x clips_per_speaker_per_class clips,
/// ordered speaker-major, then class, then clip. Each clip draws from its
/// own stream derived from (seed, speaker, class, clip), so any subset can
/// be regenerated independently.
inline std::vector<LabeledClip> synth_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  using std::numbers::pi;
  const auto n = static_cast<std::size_t>(std::llround(spec.clip_seconds * spec.sample_rate));
  require(n >= 1, ErrorCode::InvalidArgument, "clip shorter than one sample");
  const double rate = spec.sample_rate;
  // Voice has unit amplitude (power 0.5); tones share the configured level.
  const double tone_power = 0.5 * std::pow(10.0, spec.tone_level_db / 10.0);
  const double tone_amp =
      std::sqrt(2.0 * tone_power / static_cast<double>(spec.tones_per_clip));

  std::vector<LabeledClip> corpus;
  corpus.reserve(spec.n_classes * spec.n_speakers * spec.clips_per_speaker_per_class);
  for (std::size_t s = 0; s < spec.n_speakers; ++s) {
    Rng speaker_rng(derive_seed(spec.seed, "speaker", s));
    std::uniform_real_distribution<double> offset_dist(-spec.max_pitch_offset_hz,
                                                       spec.max_pitch_offset_hz);
    std::uniform_real_distribution<double> f0_dist(80.0, 150.0);
    const double offset = offset_dist(speaker_rng);
    const double f0 = f0_dist(speaker_rng);
    const std::string key = speaker_key(s);

    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      const double band_lo = 300.0 + 400.0 * static_cast<double>(c) + offset;
      for (std::size_t k = 0; k < spec.clips_per_speaker_per_class; ++k) {
        Rng rng(derive_seed(spec.seed, "clip", s, c, k));
        std::uniform_real_distribution<double> phase(0.0, 2.0 * pi);
        std::uniform_real_distribution<double> in_band(band_lo, band_lo + 200.0);
        std::uniform_real_distribution<double> jitter(-5.0, 5.0);
        std::uniform_real_distribution<double> gain_dist(0.3, 0.8);
        std::normal_distribution<double> dither(0.0, 1.0);

        struct Partial {
          double freq, amp, phase;
        };
        std::vector<Partial> partials;
        partials.push_back({f0 + jitter(rng), 1.0, phase(rng)});
        for (std::size_t j = 0; j < spec.tones_per_clip; ++j)
          partials.push_back({in_band(rng), tone_amp, phase(rng)});

        std::vector<double> x(n, 0.0);
        for (const auto& p : partials) {
          const double w = 2.0 * pi * p.freq / rate;
          for (std::size_t t = 0; t < n; ++t)
            x[t] += p.amp * std::sin(w * static_cast<double>(t) + p.phase);
        }
        double peak = 0.0;
        for (double v : x) peak = std::max(peak, std::abs(v));
        const double gain = gain_dist(rng) / std::max(peak, 1e-12);
        for (double& v : x) {
          v = v * gain + spec.dither_std * dither(rng);
          v = std::clamp(v, -1.0, 1.0);
        }
        corpus.push_back({AudioClip{std::move(x), spec.sample_rate}, c, key});
      }
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Feature files: `frames=<n> dims=<d> label=<int> client=<string>` then n*d
// whitespace-separated reals in row-major order.

struct FeatureExample {
  FeatureMatrix features;
  std::size_t label = 0;
  std::string client;
};

/// Parses feature-file text. When n_classes is given, labels must lie in
/// [0, n_classes).
inline FeatureExample parse_feature_file(std::string_view text,
                                         std::optional<std::size_t> n_classes = {}) {
  const auto eol = text.find('\n');
  const std::string header(text.substr(0, eol));
  std::istringstream hs(header);
  std::optional<long long> frames, dims, label;
  std::optional<std::string> client;
  std::string token;
  while (hs >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::MalformedHeader, "header token without '=': " + token);
    const std::string key = token.substr(0, eq);
    const std::string value = token.substr(eq + 1);
    auto as_int = [&](const std::string& v) -> long long {
      long long out = 0;
      auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || ptr != v.data() + v.size())
        fail(ErrorCode::MalformedHeader, "non-integer value for " + key + ": " + v);
      return out;
    };
    if (key == "frames") frames = as_int(value);
    else if (key == "dims") dims = as_int(value);
    else if (key == "label") label = as_int(value);
    else if (key == "client") client = value;
    else fail(ErrorCode::MalformedHeader, "unknown header field " + key);
  }
  if (!frames || !dims || !label || !client || client->empty())
    fail(ErrorCode::MalformedHeader, "header must declare frames, dims, label and client");
  if (*frames < 0 || *dims < 0)
    fail(ErrorCode::MalformedHeader, "negative frames/dims");
  if (*label < 0 || (n_classes && static_cast<std::size_t>(*label) >= *n_classes))
    fail(ErrorCode::UnknownLabel, "label " + std::to_string(*label) + " outside vocabulary");

  const auto rows = static_cast<std::size_t>(*frames);
  const auto cols = static_cast<std::size_t>(*dims);
  std::vector<double> values;
  values.reserve(rows * cols);
  std::string_view body = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
  std::size_t i = 0;
  while (i < body.size()) {
    while (i < body.size() && std::isspace(static_cast<unsigned char>(body[i]))) ++i;
    if (i == body.size()) break;
    std::size_t j = i;
    while (j < body.size() && !std::isspace(static_cast<unsigned char>(body[j]))) ++j;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(body.data() + i, body.data() + j, v);
    if (ec != std::errc() || ptr != body.data() + j || !std::isfinite(v))
      fail(ErrorCode::DimensionMismatch,
           "unparseable value '" + std::string(body.substr(i, j - i)) + "'");
    values.push_back(v);
    i = j;
  }
  if (values.size() != rows * cols)
    fail(ErrorCode::DimensionMismatch, "header declares " + std::to_string(rows * cols) +
                                           " values but " + std::to_string(values.size()) +
                                           " are present");
  return {FeatureMatrix(rows, cols, std::move(values)), static_cast<std::size_t>(*label),
          *client};
}

inline FeatureExample load_feature_file(const std::filesystem::path& path,
                                        std::optional<std::size_t> n_classes = {}) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_feature_file(std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                             bytes.size()),
                            n_classes);
}

/// Values are written in shortest round-trip form, so a write/read cycle is
/// lossless.
inline void write_feature_file(std::ostream& out, const FeatureExample& ex) {
  require(!ex.client.empty() && ex.client.find_first_of(" \t\n") == std::string::npos,
          ErrorCode::InvalidArgument, "client key must be non-empty without whitespace");
  out << "frames=" << ex.features.rows() << " dims=" << ex.features.cols()
      << " label=" << ex.label << " client=" << ex.client << '\n';
  for (std::size_t r = 0; r < ex.features.rows(); ++r) {
    for (std::size_t c = 0; c < ex.features.cols(); ++c) {
      if (c) out << ' ';
      out << detail::format_real(ex.features(r, c));
    }
    out << '\n';
  }
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureExample& ex) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  write_feature_file(out, ex);
}

// ---------------------------------------------------------------------------
// Corpus manifest: `path<TAB>label<TAB>client_key`, one example per line.

struct ManifestEntry {
  std::filesystem::path path;
  std::size_t label = 0;
  std::string client_key;
};

/// Relative paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) fail(ErrorCode::IoError, "cannot open manifest " + manifest.string());
  const auto base = manifest.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      fail(ErrorCode::MalformedHeader,
           manifest.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    ManifestEntry e;
    e.path = line.substr(0, t1);
    if (e.path.is_relative()) e.path = base / e.path;
    const std::string label = line.substr(t1 + 1, t2 - t1 - 1);
    auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), e.label);
    if (ec != std::errc() || ptr != label.data() + label.size())
      fail(ErrorCode::MalformedHeader,
           manifest.string() + ":" + std::to_string(line_no) + ": bad label '" + label + "'");
    e.client_key = line.substr(t2 + 1);
    if (e.client_key.empty())
      fail(ErrorCode::MalformedHeader,
           manifest.string() + ":" + std::to_string(line_no) + ": empty client key");
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void write_manifest(const std::filesystem::path& manifest,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream out(manifest);
  if (!out) fail(ErrorCode::IoError, "cannot write " + manifest.string());
  for (const auto& e : entries)
    out << e.path.string() << '\t' << e.label << '\t' << e.client_key << '\n';
}

}  // namespace fedaudio
