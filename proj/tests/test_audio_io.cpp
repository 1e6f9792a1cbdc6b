// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "fedaudio/audio_io.hpp"
#include "test_util.hpp"

using namespace fedaudio;
using fedaudio::testing::TempDir;

namespace {

std::vector<std::uint8_t> wav_bytes(std::uint16_t format, std::uint16_t channels,
                                    std::uint16_t bits, std::uint32_t rate,
                                    const std::vector<std::int16_t>& samples) {
  std::vector<std::uint8_t> out;
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  const auto data = static_cast<std::uint32_t>(samples.size() * 2);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  u32(36 + data);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  u32(data);
  for (auto s : samples) u16(static_cast<std::uint16_t>(s));
  return out;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return ErrorCode::IoError;
}

}  // namespace

TEST(Wav, SampleValueScaling) {
  const auto clip = parse_wav(wav_bytes(1, 1, 16, 16000, {16384, -32768, 0}));
  ASSERT_EQ(clip.size(), 3u);
  EXPECT_EQ(clip.samples[0], 0.5);
  EXPECT_EQ(clip.samples[1], -1.0);
  EXPECT_EQ(clip.samples[2], 0.0);
}

TEST(Wav, AllZeroData) {
  const auto clip = parse_wav(wav_bytes(1, 1, 16, 16000, std::vector<std::int16_t>(100, 0)));
  EXPECT_EQ(clip.sample_rate, 16000u);
  EXPECT_EQ(clip.size(), 100u);
  for (double s : clip.samples) EXPECT_EQ(s, 0.0);
}

TEST(Wav, RejectsFloatStereoAndWidth) {
  EXPECT_EQ(code_of([] { parse_wav(wav_bytes(3, 1, 16, 16000, {0})); }),
            ErrorCode::UnsupportedEncoding);
  EXPECT_EQ(code_of([] { parse_wav(wav_bytes(1, 2, 16, 16000, {0, 0})); }),
            ErrorCode::UnsupportedEncoding);
  EXPECT_EQ(code_of([] { parse_wav(wav_bytes(1, 1, 8, 16000, {0})); }),
            ErrorCode::UnsupportedEncoding);
}

TEST(Wav, RejectsNonRiffAndTruncation) {
  const std::vector<std::uint8_t> junk{'h', 'e', 'l', 'l', 'o', ' ', 'w', 'o', 'r', 'l', 'd', '!'};
  EXPECT_EQ(code_of([&] { parse_wav(junk); }), ErrorCode::NotWav);
  auto bytes = wav_bytes(1, 1, 16, 16000, {1, 2, 3, 4});
  bytes.resize(bytes.size() - 3);
  EXPECT_EQ(code_of([&] { parse_wav(bytes); }), ErrorCode::TruncatedFile);
}

TEST(Wav, SkipsUnknownChunks) {
  auto bytes = wav_bytes(1, 1, 16, 8000, {100, -100});
  std::vector<std::uint8_t> extra{'L', 'I', 'S', 'T', 3, 0, 0, 0, 'a', 'b', 'c', 0};
  bytes.insert(bytes.begin() + 36, extra.begin(), extra.end());
  const auto clip = parse_wav(bytes);
  EXPECT_EQ(clip.size(), 2u);
  EXPECT_EQ(clip.sample_rate, 8000u);
}

TEST(Wav, RoundTripWithinOneQuantum) {
  TempDir dir;
  SynthCorpusSpec spec;
  spec.n_speakers = 2;
  spec.clips_per_speaker_per_class = 1;
  for (const auto& lc : synth_corpus(spec)) {
    write_wav(dir / "x.wav", lc.clip);
    const auto back = load_wav(dir / "x.wav");
    ASSERT_EQ(back.size(), lc.clip.size());
    for (std::size_t i = 0; i < back.size(); ++i)
      ASSERT_LE(std::abs(back.samples[i] - lc.clip.samples[i]), 1.0 / 32768.0);
  }
}

TEST(Wav, FuzzedBytesOnlyRaiseLibraryErrors) {
  Rng rng(99);
  const auto good = wav_bytes(1, 1, 16, 16000, {1, 2, 3, 4, 5, 6});
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 20000; ++trial) {
    std::vector<std::uint8_t> b;
    if (trial % 2 == 0) {
      b = good;
      const int flips = 1 + trial % 5;
      for (int f = 0; f < flips; ++f) b[rng() % b.size()] = static_cast<std::uint8_t>(byte(rng));
      b.resize(rng() % (b.size() + 1));
    } else {
      b.resize(rng() % 64);
      for (auto& v : b) v = static_cast<std::uint8_t>(byte(rng));
      if (b.size() >= 12 && trial % 3 == 0) std::copy_n("RIFF\0\0\0\0WAVE", 12, b.begin());
    }
    try {
      (void)parse_wav(b);
    } catch (const Error&) {
    }
  }
}

TEST(SynthCorpus, CountAndOrder) {
  SynthCorpusSpec spec;
  spec.n_classes = 4;
  spec.n_speakers = 20;
  spec.clips_per_speaker_per_class = 5;
  spec.clip_seconds = 1.0;
  spec.sample_rate = 16000;
  spec.seed = 7;
  const auto corpus = synth_corpus(spec);
  ASSERT_EQ(corpus.size(), 400u);
  EXPECT_EQ(corpus.front().speaker_id, "spk0000");
  EXPECT_EQ(corpus.back().speaker_id, "spk0019");
  EXPECT_EQ(corpus.back().label, 3u);
  for (const auto& c : corpus) {
    EXPECT_EQ(c.clip.size(), 16000u);
    for (double s : c.clip.samples) ASSERT_TRUE(s >= -1.0 && s <= 1.0);
  }
}

TEST(SynthCorpus, DeterministicAndSeedSensitive) {
  SynthCorpusSpec spec;
  spec.n_speakers = 2;
  spec.clips_per_speaker_per_class = 2;
  const auto a = synth_corpus(spec);
  const auto b = synth_corpus(spec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].clip.samples, b[i].clip.samples);

  spec.seed = 8;
  const auto c = synth_corpus(spec);
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t differing = 0;
    for (std::size_t t = 0; t < 1000; ++t) differing += a[i].clip.samples[t] != c[i].clip.samples[t];
    EXPECT_EQ(differing, 1000u);
  }
}

TEST(SynthCorpus, RejectsBandsAboveNyquist) {
  SynthCorpusSpec spec;
  spec.n_classes = 30;
  spec.sample_rate = 8000;
  EXPECT_THROW(synth_corpus(spec), Error);
}

TEST(FeatureFile, ParsesShape) {
  std::string text = "frames=5 dims=3 label=2 client=spk0001\n";
  for (int i = 0; i < 15; ++i) text += std::to_string(i) + (i % 3 == 2 ? "\n" : " ");
  const auto ex = parse_feature_file(text);
  EXPECT_EQ(ex.features.rows(), 5u);
  EXPECT_EQ(ex.features.cols(), 3u);
  EXPECT_EQ(ex.features(4, 2), 14.0);
  EXPECT_EQ(ex.label, 2u);
  EXPECT_EQ(ex.client, "spk0001");
}

TEST(FeatureFile, CountMismatch) {
  std::string text = "frames=5 dims=3 label=0 client=a\n";
  for (int i = 0; i < 14; ++i) text += "1.5 ";
  EXPECT_EQ(code_of([&] { parse_feature_file(text); }), ErrorCode::DimensionMismatch);
  text += "2 3";
  EXPECT_EQ(code_of([&] { parse_feature_file(text); }), ErrorCode::DimensionMismatch);
}

TEST(FeatureFile, HeaderAndLabelErrors) {
  EXPECT_EQ(code_of([] { parse_feature_file("frames=1 label=0 client=a\n1\n"); }),
            ErrorCode::MalformedHeader);
  EXPECT_EQ(code_of([] { parse_feature_file("frames=1 dims=1 label=4 client=a\n1\n", 4); }),
            ErrorCode::UnknownLabel);
}

TEST(FeatureFile, RoundTripIsExact) {
  TempDir dir;
  Rng rng(3);
  FeatureExample ex{fedaudio::testing::random_matrix(10, 8, rng, 1e3), 1, "client_7"};
  ex.features(0, 0) = 1e-300;
  ex.features(0, 1) = -0.1;
  write_feature_file(dir / "f.txt", ex);
  const auto back = load_feature_file(dir / "f.txt");
  EXPECT_EQ(back.features, ex.features);
  EXPECT_EQ(back.label, 1u);
  EXPECT_EQ(back.client, "client_7");
}

TEST(Manifest, RelativePathsResolveAgainstManifest) {
  TempDir dir;
  std::filesystem::create_directories(dir / "sub");
  {
    std::ofstream out(dir / "sub" / "m.tsv");
    out << "# comment\n"
        << "a.wav\t1\tspk0\n"
        << "/abs/b.wav\t0\tspk1\n";
  }
  const auto m = load_manifest(dir / "sub" / "m.tsv");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].path, dir / "sub" / "a.wav");
  EXPECT_EQ(m[0].label, 1u);
  EXPECT_EQ(m[0].client_key, "spk0");
  EXPECT_EQ(m[1].path, std::filesystem::path("/abs/b.wav"));
}
