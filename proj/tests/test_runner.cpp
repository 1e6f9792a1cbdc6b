// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fedaudio/runner.hpp"
#include "test_util.hpp"

using namespace fedaudio;
using fedaudio::testing::TempDir;

namespace {

json small_config(const fs::path& out) {
  json j = json::parse(R"({
    "name": "tiny",
    "dataset": {"synthetic": {"n_classes": 3, "n_speakers": 4, "test_speakers": 1,
                              "clips_per_speaker_per_class": 2, "clip_seconds": 0.2,
                              "sample_rate": 8000, "seed": 3}},
    "feature": {"frame_length": 256, "n_mels": 16},
    "model": {"kind": "mlp", "hidden": [8]},
    "fed": {"rounds": 4, "sample_ratio": 0.5},
    "targets": [0.5, 0.9]
  })");
  j["output_dir"] = out.string();
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const json& j) {
  try {
    parse_config_json(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "expected ConfigError for " << j.dump();
  return {};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDAUDIO_SIM_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsAreFilled) {
  const auto cfg = parse_config_json(json::parse(R"({"dataset": {"synthetic": {}}, "corruption": {}})"));
  EXPECT_EQ(cfg.fed.batch_size, 16u);
  EXPECT_EQ(cfg.fed.epochs_per_round, 1u);
  EXPECT_EQ(cfg.fed.server_lr, 0.001);
  EXPECT_EQ(cfg.feature.hop_ms, 10.0);
  EXPECT_EQ(cfg.feature.frame_length, 1024u);
  EXPECT_EQ(cfg.feature.n_mels, 128u);
  EXPECT_FALSE(cfg.corruption.snr_db.has_value());
  EXPECT_FALSE(cfg.corruption.label_errors.has_value());
  EXPECT_EQ(cfg.n_seeds, 1u);
  const auto echoed = config_to_json(cfg);
  EXPECT_EQ(echoed["fed"]["batch_size"], 16);
  EXPECT_EQ(echoed["feature"]["hop_ms"], 10.0);
  EXPECT_EQ(parse_config_json(echoed).fed.batch_size, 16u);
}

TEST(Config, InfeasibleLabelErrors) {
  const auto msg = config_error(json::parse(
      R"({"dataset": {"synthetic": {}}, "corruption": {"error_ratio": 0.3, "error_sparsity": 1}})"));
  EXPECT_NE(msg.find("corruption"), std::string::npos);
}

TEST(Config, NoiseNeedsRawAudio) {
  const auto msg = config_error(json::parse(
      R"({"dataset": {"features": {"train_dir": "a", "test_dir": "b"}}, "corruption": {"snr_db": 10}})"));
  EXPECT_NE(msg.find("corruption.snr_db"), std::string::npos);
}

TEST(Config, FieldPathsInErrors) {
  EXPECT_NE(config_error(json::parse(R"({"dataset": {"synthetic": {}}, "fed": {"batch_size": -1}})"))
                .find("fed.batch_size"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"dataset": {"synthetic": {}}, "fed": {"bogus": 1}})"))
                .find("fed.bogus"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"dataset": {"synthetic": {}}, "targets": [0.8, 0.5]})"))
                .find("targets"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"dataset": {"synthetic": {}}, "n_seeds": 0})")).find("n_seeds"),
            std::string::npos);
  config_error(json::parse(R"({"dataset": {}})"));
  config_error(json::parse(R"({"dataset": {"synthetic": {}}, "model": {"kind": "resnet"}})"));
  config_error(json::parse(R"({"dataset": {"synthetic": {}}, "corruption": {"error_ratio": 0.1}})"));
}

TEST(Config, HashTracksResolvedConfig) {
  const auto a = parse_config_json(small_config("/tmp/a"));
  auto b = parse_config_json(small_config("/tmp/b"));
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.fed.rounds += 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Experiment, WritesOutputsAndIsDeterministic) {
  TempDir dir;
  auto j = small_config(dir / "one");
  j["n_seeds"] = 5;
  const auto cfg = parse_config_json(j);
  const auto result = run_experiment(cfg);
  ASSERT_EQ(result.trials.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto path = dir / "one" / ("seed_" + std::to_string(t) + ".jsonl");
    EXPECT_EQ(read_jsonl(path).size(), 4u);
    EXPECT_TRUE(fs::exists(dir / "one" / ("seed_" + std::to_string(t) + ".params")));
  }
  const auto csv = lines(slurp(dir / "one" / "summary.csv"));
  ASSERT_EQ(csv.size(), 1u + 2u * 2u);
  EXPECT_EQ(csv[0], summary_csv_header());
  for (std::size_t i = 1; i < csv.size(); ++i) {
    EXPECT_EQ(csv[i].rfind(result.config_hash + ",fedavg,0.5,", 0), 0u) << csv[i];
    EXPECT_NE(csv[i].find(",5,"), std::string::npos) << csv[i];
  }

  const auto meta = json::parse(slurp(dir / "one" / "metadata.json"));
  EXPECT_EQ(meta["f1_averaging"], "macro");
  EXPECT_EQ(meta["trials"].size(), 5u);
  EXPECT_EQ(meta["trials"][0]["norm_stats"]["mean"].size(), 16u);
  EXPECT_EQ(meta["config"]["fed"]["batch_size"], 16);

  j["output_dir"] = (dir / "two").string();
  run_experiment(parse_config_json(j));
  EXPECT_EQ(slurp(dir / "one" / "summary.csv"), slurp(dir / "two" / "summary.csv"));
  EXPECT_EQ(slurp(dir / "one" / "seed_3.jsonl"), slurp(dir / "two" / "seed_3.jsonl"));
}

TEST(Experiment, CorruptionsAreRecorded) {
  TempDir dir;
  auto j = small_config(dir / "c");
  j["corruption"] = {{"snr_db", 10.0}, {"error_ratio", 0.3}, {"error_sparsity", 0.0}};
  j["partition"] = {{"scheme", "dirichlet"}, {"alpha", 0.5}, {"n_clients", 3}};
  const auto result = run_experiment(parse_config_json(j));
  const auto meta = json::parse(slurp(dir / "c" / "metadata.json"));
  const auto q = meta["trials"][0]["transition_matrix"];
  ASSERT_EQ(q.size(), 3u);
  EXPECT_EQ(q[0][0], 0.7);
  EXPECT_EQ(meta["trials"][0]["n_clients"], 3);
  const auto row = format_csv_row(result.rows.front());
  EXPECT_NE(row.find(",10,0.3,0,0.5,"), std::string::npos) << row;
}

TEST(Experiment, ManifestAndFeatureInputs) {
  TempDir dir;
  SynthCorpusSpec spec;
  spec.n_classes = 2;
  spec.n_speakers = 3;
  spec.clips_per_speaker_per_class = 2;
  spec.clip_seconds = 0.1;
  spec.sample_rate = 8000;
  const auto corpus = synth_corpus(spec);
  fs::create_directories(dir / "wav");
  fs::create_directories(dir / "ftrain");
  fs::create_directories(dir / "ftest");
  std::vector<ManifestEntry> train, test;
  FeatureConfig fc;
  fc.frame_length = 256;
  fc.n_mels = 16;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto name = "c" + std::to_string(i);
    write_wav(dir / "wav" / (name + ".wav"), corpus[i].clip);
    const bool is_test = corpus[i].speaker_id == "spk0002";
    (is_test ? test : train).push_back({"wav/" + name + ".wav", corpus[i].label, corpus[i].speaker_id});
    write_feature_file(dir / (is_test ? "ftest" : "ftrain") / (name + ".txt"),
                       {extract_mel(corpus[i].clip, fc), corpus[i].label, corpus[i].speaker_id});
  }
  write_manifest(dir / "train.tsv", train);
  write_manifest(dir / "test.tsv", test);
  const auto before = slurp(dir / "train.tsv");

  json common = {{"feature", {{"frame_length", 256}, {"n_mels", 16}}},
                 {"model", {{"kind", "mlp"}, {"hidden", {4}}}},
                 {"fed", {{"rounds", 2}, {"sample_ratio", 1.0}}}};
  json m = common;
  m["dataset"] = {{"manifest", {{"train", "train.tsv"}, {"test", "test.tsv"}}}};
  m["output_dir"] = "out_manifest";
  m["corruption"] = {{"snr_db", 20.0}};
  {
    std::ofstream out(dir / "m.json");
    out << m.dump();
  }
  const auto rm = run_experiment(parse_config(dir / "m.json"));
  EXPECT_EQ(rm.trials.front().records.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "out_manifest" / "summary.csv"));
  EXPECT_EQ(slurp(dir / "train.tsv"), before);

  json f = common;
  f["dataset"] = {{"features", {{"train_dir", (dir / "ftrain").string()},
                                {"test_dir", (dir / "ftest").string()}}}};
  f["output_dir"] = (dir / "out_features").string();
  const auto rf = run_experiment(parse_config_json(f));
  const auto meta = json::parse(slurp(dir / "out_features" / "metadata.json"));
  EXPECT_EQ(meta["trials"][0]["n_clients"], 2);
  EXPECT_EQ(rf.trials.size(), 1u);
}

TEST(Experiment, SegmentationExpandsClips) {
  TempDir dir;
  auto j = small_config(dir / "s");
  j["dataset"]["synthetic"]["clip_seconds"] = 0.5;
  j["segment"] = {{"seconds", 0.2}, {"train_overlap", 0.1}, {"test_overlap", 0.0}};
  run_experiment(parse_config_json(j));
  const auto meta = json::parse(slurp(dir / "s" / "metadata.json"));
  // 0.5 s clips: 4 train windows (step 0.1 s) and 2 test windows (step 0.2 s).
  EXPECT_EQ(meta["trials"][0]["n_train"], 4 * 3 * 2 * 4);
  EXPECT_EQ(meta["trials"][0]["n_test"], 1 * 3 * 2 * 2);
}

TEST(Report, ReproducesSummaryAndBaselineRatio) {
  TempDir dir;
  const auto cfg = parse_config_json(small_config(dir / "r"));
  const auto result = run_experiment(cfg);
  const auto trials = read_seed_records(dir / "r");
  const auto rows = summarize_trials(cfg, result.config_hash, trials);
  ASSERT_EQ(rows.size(), result.rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    EXPECT_EQ(format_csv_row(rows[i]), format_csv_row(result.rows[i]));

  std::vector<std::vector<RoundRecord>> fake(1, std::vector<RoundRecord>(3));
  fake[0][2].test_accuracy = 0.95;
  auto c2 = cfg;
  c2.targets = {0.9};
  std::vector<std::vector<RoundRecord>> treat(1, std::vector<RoundRecord>(6));
  treat[0][5].test_accuracy = 0.95;
  const auto r = summarize_trials(c2, "x", treat, &fake);
  EXPECT_EQ(r[0].rounds.render(), "6 (2.00×)");
  EXPECT_NE(format_csv_row(r[0]).find(",6,3,2.00"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  {
    std::ofstream bad(dir / "bad.json");
    bad << R"({"dataset": {"synthetic": {}}, "corruption": {"error_ratio": 0.3, "error_sparsity": 1}})";
  }
  EXPECT_EQ(run_cli("run " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("features " + (dir / "bad.json").string()), 1);
  {
    std::ofstream good(dir / "good.json");
    good << small_config(dir / "out").dump();
  }
  EXPECT_EQ(run_cli("run -q " + (dir / "good.json").string()), 0);
  EXPECT_EQ(run_cli("report " + (dir / "out").string() + " --target 0.5 -o " +
                    (dir / "rep.csv").string()),
            0);
  EXPECT_EQ(lines(slurp(dir / "rep.csv")).size(), 3u);
}

TEST(Cli, CorruptPartitionFeatures) {
  TempDir dir;
  SynthCorpusSpec spec;
  spec.n_classes = 3;
  spec.n_speakers = 2;
  spec.clips_per_speaker_per_class = 3;
  spec.clip_seconds = 0.1;
  std::vector<ManifestEntry> entries;
  const auto corpus = synth_corpus(spec);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto p = dir / ("c" + std::to_string(i) + ".wav");
    write_wav(p, corpus[i].clip);
    entries.push_back({p, corpus[i].label, corpus[i].speaker_id});
  }
  write_manifest(dir / "m.tsv", entries);
  const auto m = (dir / "m.tsv").string();

  ASSERT_EQ(run_cli("partition " + m + " -o " + (dir / "p.csv").string()), 0);
  const auto p = lines(slurp(dir / "p.csv"));
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0], "client_id,size,class_0,class_1,class_2");
  EXPECT_EQ(p[1], "spk0000,9,3,3,3");

  ASSERT_EQ(run_cli("partition " + m + " --scheme dirichlet --n-clients 3 --alpha 0.5 -o " +
                    (dir / "d.csv").string()),
            0);
  EXPECT_EQ(lines(slurp(dir / "d.csv")).size(), 4u);

  ASSERT_EQ(run_cli("corrupt " + m + " --out-dir " + (dir / "noisy").string() +
                    " --snr-db 10 --error-ratio 0.5 --error-sparsity 0 --seed 4"),
            0);
  const auto noisy = load_manifest(dir / "noisy" / "manifest.tsv");
  ASSERT_EQ(noisy.size(), entries.size());
  const auto a = load_wav(entries[0].path), b = load_wav(noisy[0].path);
  EXPECT_NEAR(measure_snr(a, b), 10.0, 1.0);
  EXPECT_EQ(lines(slurp(dir / "noisy" / "q.csv")).size(), 3u);
  EXPECT_EQ(run_cli("corrupt " + m + " --out-dir " + (dir / "x").string() +
                    " --error-ratio 0.3 --error-sparsity 1"),
            2);

  ASSERT_EQ(run_cli("features " + entries[0].path.string() + " --frame-length 256 --n-mels 16 -o " +
                    (dir / "f.txt").string()),
            0);
  const auto fx = load_feature_file(dir / "f.txt");
  EXPECT_EQ(fx.features.cols(), 16u);
}
