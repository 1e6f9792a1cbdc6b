// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration. One trial runs
//   corpus -> [segment] -> [AWGN] -> log-Mel -> z-normalize -> partition
//   -> [label errors on training shards] -> federation
// and every trial t uses seed master_seed + t. Outputs per experiment:
//   config.json      resolved configuration (all defaults filled in)
//   metadata.json    config hash, normalization stats and Q per trial
//   seed_<t>.jsonl   one RoundRecord per line, flushed every round
//   seed_<t>.params  final global parameters
//   summary.csv      mean/std over trials and rounds-to-target per target
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fedaudio/audio_io.hpp"
#include "fedaudio/corruption.hpp"
#include "fedaudio/error.hpp"
#include "fedaudio/features.hpp"
#include "fedaudio/fl_core.hpp"
#include "fedaudio/metrics.hpp"
#include "fedaudio/model.hpp"
#include "fedaudio/partition.hpp"

namespace fedaudio {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct SyntheticSource {
  SynthCorpusSpec spec;
  // Extra held-out speakers generated after the training speakers.
  std::size_t test_speakers = 4;
};

struct ManifestSource {
  fs::path train;
  fs::path test;
  std::optional<std::size_t> n_classes;
};

struct FeatureDirSource {
  fs::path train_dir;
  fs::path test_dir;
  std::optional<std::size_t> n_classes;
};

using DatasetSource = std::variant<SyntheticSource, ManifestSource, FeatureDirSource>;

struct SegmentConfig {
  double seconds = 3.0;
  double train_overlap = 0.5;
  double test_overlap = 1.0;
};

enum class PartitionScheme { by_key, dirichlet };

struct PartitionConfig {
  PartitionScheme scheme = PartitionScheme::by_key;
  double alpha = 0.5;
  std::size_t n_clients = 50;
  std::size_t min_per_client = 1;
};

struct LabelErrorConfig {
  double error_ratio = 0.0;
  double error_sparsity = 0.0;
};

struct CorruptionConfig {
  std::optional<double> snr_db;
  std::optional<LabelErrorConfig> label_errors;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSource dataset = SyntheticSource{};
  std::optional<SegmentConfig> segment;
  PartitionConfig partition;
  CorruptionConfig corruption;
  FeatureConfig feature;
  bool normalize = true;
  ModelArch arch;
  FedConfig fed;
  std::size_t n_seeds = 1;
  std::vector<double> targets;
  fs::path output_dir = "results";
  std::optional<fs::path> baseline_dir;
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

[[noreturn]] inline void config_error(const std::string& path, const std::string& why) {
  fail(ErrorCode::ConfigError, path + ": " + why);
}

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    const json& v = at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected true/false");
        out = v.get<bool>();
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_integer() || v.get<long long>() < 0)
          throw std::invalid_argument("expected a non-negative integer");
        out = v.get<T>();
      } else {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        out = v.get<std::string>();
      }
    } catch (const std::exception& e) {
      config_error(path(key), e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) config_error(path(it.key().c_str()), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline std::optional<std::size_t> known_class_count(const ExperimentConfig& cfg) {
  if (auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) return s->spec.n_classes;
  if (auto* m = std::get_if<ManifestSource>(&cfg.dataset)) return m->n_classes;
  return std::get<FeatureDirSource>(cfg.dataset).n_classes;
}

/// Cross-field checks; raises ConfigError naming the offending field.
inline void validate_config(const ExperimentConfig& cfg) {
  using detail::config_error;
  auto wrap = [](const std::string& path, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ConfigError) throw;
      config_error(path, e.what());
    }
  };
  if (cfg.n_seeds < 1) config_error("n_seeds", "must be >= 1");
  for (std::size_t i = 0; i < cfg.targets.size(); ++i) {
    if (!(cfg.targets[i] > 0.0 && cfg.targets[i] <= 1.0))
      config_error("targets", "each target must lie in (0, 1]");
    if (i && cfg.targets[i] <= cfg.targets[i - 1])
      config_error("targets", "must be strictly increasing");
  }
  if (auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) {
    wrap("dataset.synthetic", [&] { s->spec.validate(); });
    if (s->test_speakers < 1) config_error("dataset.synthetic.test_speakers", "must be >= 1");
  }
  if (cfg.corruption.snr_db) {
    if (std::holds_alternative<FeatureDirSource>(cfg.dataset))
      config_error("corruption.snr_db",
                   "AWGN needs raw audio; precomputed feature inputs cannot be noised");
    if (!std::isfinite(*cfg.corruption.snr_db)) config_error("corruption.snr_db", "must be finite");
  }
  if (cfg.corruption.label_errors) {
    const auto& le = *cfg.corruption.label_errors;
    const auto k = known_class_count(cfg).value_or(std::size_t{2});
    wrap("corruption", [&] {
      check_label_error_spec(std::max<std::size_t>(k, 2), {le.error_ratio, le.error_sparsity, 0});
    });
  }
  if (cfg.segment) {
    const auto& sg = *cfg.segment;
    if (!(sg.seconds > 0.0)) config_error("segment.seconds", "must be > 0");
    if (!(sg.train_overlap >= 0.0 && sg.train_overlap < sg.seconds))
      config_error("segment.train_overlap", "must satisfy 0 <= overlap < seconds");
    if (!(sg.test_overlap >= 0.0 && sg.test_overlap < sg.seconds))
      config_error("segment.test_overlap", "must satisfy 0 <= overlap < seconds");
    if (std::holds_alternative<FeatureDirSource>(cfg.dataset))
      config_error("segment", "segmentation needs raw audio");
  }
  if (cfg.partition.scheme == PartitionScheme::dirichlet) {
    if (!(cfg.partition.alpha > 0.0)) config_error("partition.alpha", "must be > 0");
    if (cfg.partition.n_clients < 1) config_error("partition.n_clients", "must be >= 1");
  }
  wrap("feature", [&] { cfg.feature.validate(); });
  wrap("fed", [&] { cfg.fed.validate(); });
  ModelArch probe = cfg.arch;
  probe.input_dims = cfg.feature.n_mels;
  if (auto k = known_class_count(cfg)) probe.n_classes = *k;
  wrap("model", [&] { probe.validate(); });
}

inline ExperimentConfig parse_config_json(const json& root, const fs::path& base_dir = {}) {
  using detail::config_error;
  using detail::ObjectReader;
  ExperimentConfig cfg;
  ObjectReader top(root, "");
  top.get("name", cfg.name);
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };

  if (!top.has("dataset")) config_error("dataset", "required");
  {
    ObjectReader ds(top.at("dataset"), "dataset");
    int kinds = ds.has("synthetic") + ds.has("manifest") + ds.has("features");
    if (kinds != 1) config_error("dataset", "exactly one of synthetic/manifest/features required");
    if (ds.has("synthetic")) {
      SyntheticSource src;
      ObjectReader s(ds.at("synthetic"), "dataset.synthetic");
      s.get("n_classes", src.spec.n_classes);
      s.get("n_speakers", src.spec.n_speakers);
      s.get("test_speakers", src.test_speakers);
      s.get("clips_per_speaker_per_class", src.spec.clips_per_speaker_per_class);
      s.get("clip_seconds", src.spec.clip_seconds);
      s.get("sample_rate", src.spec.sample_rate);
      s.get("seed", src.spec.seed);
      s.get("tone_level_db", src.spec.tone_level_db);
      s.get("max_pitch_offset_hz", src.spec.max_pitch_offset_hz);
      s.get("tones_per_clip", src.spec.tones_per_clip);
      s.get("dither_std", src.spec.dither_std);
      s.finish();
      cfg.dataset = src;
    } else if (ds.has("manifest")) {
      ManifestSource src;
      ObjectReader m(ds.at("manifest"), "dataset.manifest");
      std::string train, test;
      m.get("train", train);
      m.get("test", test);
      if (train.empty() || test.empty())
        config_error("dataset.manifest", "train and test manifests are required");
      src.train = resolve(train);
      src.test = resolve(test);
      if (m.has("n_classes")) {
        std::size_t k = 0;
        m.get("n_classes", k);
        src.n_classes = k;
      }
      m.finish();
      cfg.dataset = src;
    } else {
      FeatureDirSource src;
      ObjectReader f(ds.at("features"), "dataset.features");
      std::string train, test;
      f.get("train_dir", train);
      f.get("test_dir", test);
      if (train.empty() || test.empty())
        config_error("dataset.features", "train_dir and test_dir are required");
      src.train_dir = resolve(train);
      src.test_dir = resolve(test);
      if (f.has("n_classes")) {
        std::size_t k = 0;
        f.get("n_classes", k);
        src.n_classes = k;
      }
      f.finish();
      cfg.dataset = src;
    }
    ds.finish();
  }

  if (top.has("segment")) {
    SegmentConfig sg;
    ObjectReader s(top.at("segment"), "segment");
    s.get("seconds", sg.seconds);
    s.get("train_overlap", sg.train_overlap);
    s.get("test_overlap", sg.test_overlap);
    s.finish();
    cfg.segment = sg;
  }

  if (top.has("partition")) {
    ObjectReader p(top.at("partition"), "partition");
    std::string scheme = "by_key";
    p.get("scheme", scheme);
    if (scheme == "by_key") {
      cfg.partition.scheme = PartitionScheme::by_key;
    } else if (scheme == "dirichlet") {
      cfg.partition.scheme = PartitionScheme::dirichlet;
      p.get("alpha", cfg.partition.alpha);
      p.get("n_clients", cfg.partition.n_clients);
      p.get("min_per_client", cfg.partition.min_per_client);
    } else {
      config_error("partition.scheme", "expected by_key or dirichlet, got " + scheme);
    }
    p.finish();
  }

  if (top.has("corruption")) {
    ObjectReader c(top.at("corruption"), "corruption");
    if (c.has("snr_db")) {
      double snr = 0.0;
      c.get("snr_db", snr);
      cfg.corruption.snr_db = snr;
    }
    if (c.has("error_ratio") || c.has("error_sparsity")) {
      if (!(c.has("error_ratio") && c.has("error_sparsity")))
        config_error("corruption", "error_ratio and error_sparsity must be given together");
      LabelErrorConfig le;
      c.get("error_ratio", le.error_ratio);
      c.get("error_sparsity", le.error_sparsity);
      cfg.corruption.label_errors = le;
    }
    c.finish();
  }

  if (top.has("feature")) {
    ObjectReader f(top.at("feature"), "feature");
    f.get("frame_length", cfg.feature.frame_length);
    f.get("hop_ms", cfg.feature.hop_ms);
    f.get("n_mels", cfg.feature.n_mels);
    f.get("log_floor", cfg.feature.log_floor);
    f.get("normalize", cfg.normalize);
    f.finish();
  }

  if (top.has("model")) {
    ObjectReader m(top.at("model"), "model");
    std::string kind = "mlp";
    m.get("kind", kind);
    if (kind == "mlp") {
      cfg.arch.kind = ModelKind::mlp;
      if (m.has("hidden")) {
        const json& h = m.at("hidden");
        if (!h.is_array() || h.empty()) config_error("model.hidden", "expected a non-empty array");
        cfg.arch.hidden.clear();
        for (const auto& w : h) {
          if (!w.is_number_integer() || w.get<long long>() < 1)
            config_error("model.hidden", "widths must be positive integers");
          cfg.arch.hidden.push_back(w.get<std::size_t>());
        }
      }
    } else if (kind == "conv_gru") {
      cfg.arch.kind = ModelKind::conv_gru;
      if (m.has("conv_channels")) {
        const json& c = m.at("conv_channels");
        if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() ||
            !c[1].is_number_integer())
          config_error("model.conv_channels", "expected two integers");
        cfg.arch.conv1_channels = c[0].get<std::size_t>();
        cfg.arch.conv2_channels = c[1].get<std::size_t>();
      }
      m.get("gru_hidden", cfg.arch.gru_hidden);
      m.get("dense_hidden", cfg.arch.dense_hidden);
    } else {
      config_error("model.kind", "expected mlp or conv_gru, got " + kind);
    }
    m.finish();
  }

  if (top.has("fed")) {
    ObjectReader f(top.at("fed"), "fed");
    std::string opt = "fedavg";
    f.get("optimizer", opt);
    if (opt == "fedavg") cfg.fed.optimizer = ServerOptimizer::fedavg;
    else if (opt == "fedopt") cfg.fed.optimizer = ServerOptimizer::fedopt;
    else config_error("fed.optimizer", "expected fedavg or fedopt, got " + opt);
    f.get("rounds", cfg.fed.rounds);
    f.get("sample_ratio", cfg.fed.sample_ratio);
    f.get("client_lr", cfg.fed.client_lr);
    f.get("server_lr", cfg.fed.server_lr);
    f.get("adam_beta1", cfg.fed.adam_beta1);
    f.get("adam_beta2", cfg.fed.adam_beta2);
    f.get("adam_eps", cfg.fed.adam_eps);
    f.get("epochs_per_round", cfg.fed.epochs_per_round);
    f.get("batch_size", cfg.fed.batch_size);
    f.get("master_seed", cfg.fed.master_seed);
    f.finish();
  }

  top.get("n_seeds", cfg.n_seeds);
  if (top.has("targets")) {
    const json& t = top.at("targets");
    if (!t.is_array()) config_error("targets", "expected an array of reals");
    for (const auto& v : t) {
      if (!v.is_number()) config_error("targets", "expected an array of reals");
      cfg.targets.push_back(v.get<double>());
    }
  }
  std::string out_dir;
  top.get("output_dir", out_dir);
  if (!out_dir.empty()) cfg.output_dir = resolve(out_dir);
  if (top.has("baseline_dir")) {
    std::string b;
    top.get("baseline_dir", b);
    cfg.baseline_dir = resolve(b);
  }
  top.finish();
  validate_config(cfg);
  return cfg;
}

/// Relative paths inside the file resolve against the file's directory.
inline ExperimentConfig parse_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ConfigError, path.string() + ": cannot open config file");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return parse_config_json(root, path.parent_path());
}

/// Fully resolved configuration, with every default spelled out.
inline json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  json ds;
  if (auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) {
    ds["synthetic"] = {{"n_classes", s->spec.n_classes},
                       {"n_speakers", s->spec.n_speakers},
                       {"test_speakers", s->test_speakers},
                       {"clips_per_speaker_per_class", s->spec.clips_per_speaker_per_class},
                       {"clip_seconds", s->spec.clip_seconds},
                       {"sample_rate", s->spec.sample_rate},
                       {"seed", s->spec.seed},
                       {"tone_level_db", s->spec.tone_level_db},
                       {"max_pitch_offset_hz", s->spec.max_pitch_offset_hz},
                       {"tones_per_clip", s->spec.tones_per_clip},
                       {"dither_std", s->spec.dither_std}};
  } else if (auto* m = std::get_if<ManifestSource>(&cfg.dataset)) {
    ds["manifest"] = {{"train", m->train.string()}, {"test", m->test.string()}};
    if (m->n_classes) ds["manifest"]["n_classes"] = *m->n_classes;
  } else {
    const auto& f = std::get<FeatureDirSource>(cfg.dataset);
    ds["features"] = {{"train_dir", f.train_dir.string()}, {"test_dir", f.test_dir.string()}};
    if (f.n_classes) ds["features"]["n_classes"] = *f.n_classes;
  }
  j["dataset"] = ds;
  if (cfg.segment)
    j["segment"] = {{"seconds", cfg.segment->seconds},
                    {"train_overlap", cfg.segment->train_overlap},
                    {"test_overlap", cfg.segment->test_overlap}};
  if (cfg.partition.scheme == PartitionScheme::by_key) {
    j["partition"] = {{"scheme", "by_key"}};
  } else {
    j["partition"] = {{"scheme", "dirichlet"},
                      {"alpha", cfg.partition.alpha},
                      {"n_clients", cfg.partition.n_clients},
                      {"min_per_client", cfg.partition.min_per_client}};
  }
  json corr = json::object();
  if (cfg.corruption.snr_db) corr["snr_db"] = *cfg.corruption.snr_db;
  if (cfg.corruption.label_errors) {
    corr["error_ratio"] = cfg.corruption.label_errors->error_ratio;
    corr["error_sparsity"] = cfg.corruption.label_errors->error_sparsity;
  }
  j["corruption"] = corr;
  j["feature"] = {{"frame_length", cfg.feature.frame_length},
                  {"hop_ms", cfg.feature.hop_ms},
                  {"n_mels", cfg.feature.n_mels},
                  {"log_floor", cfg.feature.log_floor},
                  {"normalize", cfg.normalize}};
  if (cfg.arch.kind == ModelKind::mlp) {
    j["model"] = {{"kind", "mlp"}, {"hidden", cfg.arch.hidden}};
  } else {
    j["model"] = {{"kind", "conv_gru"},
                  {"conv_channels", {cfg.arch.conv1_channels, cfg.arch.conv2_channels}},
                  {"gru_hidden", cfg.arch.gru_hidden},
                  {"dense_hidden", cfg.arch.dense_hidden}};
  }
  j["fed"] = {{"optimizer", cfg.fed.optimizer == ServerOptimizer::fedavg ? "fedavg" : "fedopt"},
              {"rounds", cfg.fed.rounds},
              {"sample_ratio", cfg.fed.sample_ratio},
              {"client_lr", cfg.fed.client_lr},
              {"server_lr", cfg.fed.server_lr},
              {"adam_beta1", cfg.fed.adam_beta1},
              {"adam_beta2", cfg.fed.adam_beta2},
              {"adam_eps", cfg.fed.adam_eps},
              {"epochs_per_round", cfg.fed.epochs_per_round},
              {"batch_size", cfg.fed.batch_size},
              {"master_seed", cfg.fed.master_seed}};
  j["n_seeds"] = cfg.n_seeds;
  j["targets"] = cfg.targets;
  j["output_dir"] = cfg.output_dir.string();
  if (cfg.baseline_dir) j["baseline_dir"] = cfg.baseline_dir->string();
  return j;
}

/// FNV-1a over the resolved config, excluding where results are written.
inline std::string config_hash(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("output_dir");
  return detail::hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Round records on disk

inline json record_to_json(const RoundRecord& r) {
  return {{"round", r.round},
          {"sampled_clients", r.sampled_clients},
          {"mean_train_loss", r.mean_train_loss},
          {"test_accuracy", r.test_accuracy},
          {"test_macro_f1", r.test_macro_f1}};
}

inline RoundRecord record_from_json(const json& j) {
  RoundRecord r;
  r.round = j.at("round").get<std::size_t>();
  r.sampled_clients = j.at("sampled_clients").get<std::vector<std::string>>();
  r.mean_train_loss = j.at("mean_train_loss").get<double>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.test_macro_f1 = j.at("test_macro_f1").get<double>();
  return r;
}

inline std::vector<RoundRecord> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<RoundRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      fail(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
  }
  return out;
}

/// seed_*.jsonl files in a results directory, in trial order.
inline std::vector<std::vector<RoundRecord>> read_seed_records(const fs::path& dir) {
  std::vector<std::pair<std::size_t, fs::path>> files;
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir.string() + " is not a directory");
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("seed_", 0) == 0 && e.path().extension() == ".jsonl")
      files.emplace_back(std::stoull(name.substr(5)), e.path());
  }
  if (files.empty()) fail(ErrorCode::IoError, "no seed_*.jsonl files in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<std::vector<RoundRecord>> out;
  for (const auto& [idx, path] : files) out.push_back(read_jsonl(path));
  return out;
}

inline std::vector<double> metric_series(std::span<const RoundRecord> records, TargetMetric m) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back(m == TargetMetric::accuracy ? r.test_accuracy : r.test_macro_f1);
  return out;
}

inline RoundToTarget round_to_target(std::span<const RoundRecord> records, double target,
                                     TargetMetric metric) {
  const auto series = metric_series(records, metric);
  return round_to_target(std::span<const double>(series), target);
}

/// Median across trials of the rounds-to-target; a trial that never reaches
/// the target counts as +inf. Even counts take the upper middle element.
inline std::optional<std::size_t> median_rounds(
    const std::vector<std::vector<RoundRecord>>& trials, double target, TargetMetric metric) {
  std::vector<std::size_t> rounds;
  for (const auto& t : trials) {
    const auto r = round_to_target(std::span<const RoundRecord>(t), target, metric);
    rounds.push_back(r.rounds.value_or(std::numeric_limits<std::size_t>::max()));
  }
  if (rounds.empty()) return std::nullopt;
  std::sort(rounds.begin(), rounds.end());
  const std::size_t m = rounds[rounds.size() / 2];
  if (m == std::numeric_limits<std::size_t>::max()) return std::nullopt;
  return m;
}

// ---------------------------------------------------------------------------
// Summary CSV

struct SummaryRow {
  std::string experiment_id;
  std::string optimizer;
  double sample_ratio = 0.0;
  std::optional<double> snr_db;
  std::optional<double> error_ratio;
  std::optional<double> error_sparsity;
  std::optional<double> alpha;
  std::string metric_name;
  MetricSummary summary;
  std::optional<double> target;
  RoundToTarget rounds;
};

inline const char* summary_csv_header() {
  return "experiment_id,optimizer,sample_ratio,snr_db,error_ratio,error_sparsity,alpha,"
         "metric_name,mean,std,n,rounds_to_target,baseline_rounds,ratio";
}

inline std::string format_csv_row(const SummaryRow& r) {
  auto num = [](std::optional<double> v, const char* fmt = "%g") {
    if (!v) return std::string();
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, *v);
    return std::string(buf);
  };
  std::string rounds;
  if (r.target) rounds = r.rounds.rounds ? std::to_string(*r.rounds.rounds)
                                         : ">" + std::to_string(r.rounds.total_rounds);
  std::ostringstream os;
  os << r.experiment_id << ',' << r.optimizer << ',' << num(r.sample_ratio) << ','
     << num(r.snr_db) << ',' << num(r.error_ratio) << ',' << num(r.error_sparsity) << ','
     << num(r.alpha) << ',' << r.metric_name
     << (r.target ? "@" + num(r.target) : std::string()) << ',' << num(r.summary.mean, "%.6f")
     << ',' << num(r.summary.std, "%.6f") << ',' << r.summary.n << ',' << rounds << ','
     << (r.rounds.baseline_rounds ? std::to_string(*r.rounds.baseline_rounds) : "") << ','
     << num(r.rounds.ratio, "%.2f");
  return os.str();
}

inline void write_summary_csv(const fs::path& path, std::span<const SummaryRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << summary_csv_header() << '\n';
  for (const auto& r : rows) out << format_csv_row(r) << '\n';
}

struct TrialResult {
  std::size_t index = 0;
  std::uint64_t trial_seed = 0;
  std::vector<RoundRecord> records;
  double final_accuracy = 0.0;
  double final_macro_f1 = 0.0;
};

struct ExperimentResult {
  std::string config_hash;
  std::vector<TrialResult> trials;
  std::vector<SummaryRow> rows;
};

/// Builds summary rows for one experiment from its per-trial records.
inline std::vector<SummaryRow> summarize_trials(
    const ExperimentConfig& cfg, const std::string& experiment_id,
    const std::vector<std::vector<RoundRecord>>& trials,
    const std::vector<std::vector<RoundRecord>>* baseline = nullptr) {
  std::vector<SummaryRow> rows;
  for (auto metric : {TargetMetric::accuracy, TargetMetric::f1}) {
    std::vector<double> finals;
    for (const auto& t : trials) {
      require(!t.empty(), ErrorCode::Empty, "trial without round records");
      finals.push_back(metric == TargetMetric::accuracy ? t.back().test_accuracy
                                                        : t.back().test_macro_f1);
    }
    SummaryRow base;
    base.experiment_id = experiment_id;
    base.optimizer = cfg.fed.optimizer == ServerOptimizer::fedavg ? "fedavg" : "fedopt";
    base.sample_ratio = cfg.fed.sample_ratio;
    base.snr_db = cfg.corruption.snr_db;
    if (cfg.corruption.label_errors) {
      base.error_ratio = cfg.corruption.label_errors->error_ratio;
      base.error_sparsity = cfg.corruption.label_errors->error_sparsity;
    }
    if (cfg.partition.scheme == PartitionScheme::dirichlet) base.alpha = cfg.partition.alpha;
    base.metric_name = metric == TargetMetric::accuracy ? "accuracy" : "macro_f1";
    base.summary = summarize(finals);
    if (cfg.targets.empty()) {
      rows.push_back(base);
      continue;
    }
    for (double target : cfg.targets) {
      SummaryRow row = base;
      row.target = target;
      row.rounds.target = target;
      row.rounds.total_rounds = trials.front().size();
      row.rounds.rounds = median_rounds(trials, target, metric);
      if (baseline) row.rounds.set_baseline(median_rounds(*baseline, target, metric));
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Experiment pipeline

struct RunOptions {
  std::size_t workers = default_workers();
  std::ostream* log = nullptr;
};

namespace detail {

struct AudioCorpus {
  std::vector<LabeledClip> train;
  std::vector<LabeledClip> test;
  std::size_t n_classes = 0;
};

inline std::vector<LabeledClip> load_manifest_clips(const fs::path& manifest) {
  std::vector<LabeledClip> out;
  for (const auto& e : load_manifest(manifest))
    out.push_back({load_wav(e.path), e.label, e.client_key});
  return out;
}

inline std::vector<LabeledClip> segment_all(const std::vector<LabeledClip>& clips,
                                            double seconds, double overlap) {
  std::vector<LabeledClip> out;
  for (const auto& c : clips)
    for (auto& seg : segment_clip(c.clip, seconds, overlap))
      out.push_back({std::move(seg), c.label, c.speaker_id});
  return out;
}

inline std::size_t infer_classes(std::optional<std::size_t> declared,
                                 std::initializer_list<std::size_t> max_labels_plus_one) {
  std::size_t k = 0;
  for (auto v : max_labels_plus_one) k = std::max(k, v);
  if (declared) {
    if (k > *declared)
      fail(ErrorCode::UnknownLabel, "labels exceed the declared class count");
    return *declared;
  }
  return k;
}

inline AudioCorpus load_audio_corpus(const ExperimentConfig& cfg) {
  AudioCorpus corpus;
  if (auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) {
    SynthCorpusSpec spec = s->spec;
    spec.n_speakers = s->spec.n_speakers + s->test_speakers;
    auto all = synth_corpus(spec);
    const std::string first_test = speaker_key(s->spec.n_speakers);
    for (auto& c : all) (c.speaker_id < first_test ? corpus.train : corpus.test).push_back(std::move(c));
    corpus.n_classes = s->spec.n_classes;
  } else {
    const auto& m = std::get<ManifestSource>(cfg.dataset);
    corpus.train = load_manifest_clips(m.train);
    corpus.test = load_manifest_clips(m.test);
    auto max_label = [](const std::vector<LabeledClip>& v) {
      std::size_t k = 0;
      for (const auto& c : v) k = std::max(k, c.label + 1);
      return k;
    };
    corpus.n_classes = infer_classes(m.n_classes, {max_label(corpus.train), max_label(corpus.test)});
  }
  if (cfg.segment) {
    corpus.train = segment_all(corpus.train, cfg.segment->seconds, cfg.segment->train_overlap);
    corpus.test = segment_all(corpus.test, cfg.segment->seconds, cfg.segment->test_overlap);
  }
  require(!corpus.train.empty(), ErrorCode::EmptyInput, "training corpus is empty");
  require(!corpus.test.empty(), ErrorCode::EmptyTestSet, "test corpus is empty");
  return corpus;
}

struct FeatureSet {
  std::vector<FeatureMatrix> train;
  std::vector<std::size_t> train_labels;
  std::vector<std::string> train_keys;
  std::vector<FeatureMatrix> test;
  std::vector<std::size_t> test_labels;
  std::size_t n_classes = 0;
};

inline std::vector<FeatureExample> load_feature_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<FeatureExample> out;
  for (const auto& f : files) out.push_back(load_feature_file(f));
  return out;
}

inline FeatureSet load_feature_source(const FeatureDirSource& src) {
  FeatureSet fsx;
  std::size_t k_train = 0, k_test = 0;
  for (auto& ex : load_feature_dir(src.train_dir)) {
    k_train = std::max(k_train, ex.label + 1);
    fsx.train.push_back(std::move(ex.features));
    fsx.train_labels.push_back(ex.label);
    fsx.train_keys.push_back(ex.client);
  }
  for (auto& ex : load_feature_dir(src.test_dir)) {
    k_test = std::max(k_test, ex.label + 1);
    fsx.test.push_back(std::move(ex.features));
    fsx.test_labels.push_back(ex.label);
  }
  require(!fsx.train.empty(), ErrorCode::EmptyInput, "no training feature files");
  require(!fsx.test.empty(), ErrorCode::EmptyTestSet, "no test feature files");
  fsx.n_classes = infer_classes(src.n_classes, {k_train, k_test});
  return fsx;
}

inline std::vector<FeatureMatrix> extract_all(const std::vector<LabeledClip>& clips,
                                              const FeatureConfig& fc, std::size_t workers,
                                              std::optional<double> snr_db,
                                              std::uint64_t noise_seed) {
  std::vector<FeatureMatrix> out(clips.size());
  std::map<std::uint32_t, MelExtractor> extractors;
  for (const auto& c : clips)
    if (!extractors.count(c.clip.sample_rate))
      extractors.emplace(c.clip.sample_rate, MelExtractor(fc, c.clip.sample_rate));
  parallel_for(clips.size(), workers, [&](std::size_t i) {
    const auto& ex = extractors.at(clips[i].clip.sample_rate);
    if (snr_db) {
      out[i] = ex(inject_awgn(clips[i].clip, {*snr_db, derive_seed(noise_seed, i)}));
    } else {
      out[i] = ex(clips[i].clip);
    }
  });
  return out;
}

inline FeatureSet featurize(const AudioCorpus& corpus, const ExperimentConfig& cfg,
                            std::size_t workers, std::optional<double> snr_db,
                            std::uint64_t trial_seed) {
  FeatureSet fsx;
  fsx.n_classes = corpus.n_classes;
  fsx.train = extract_all(corpus.train, cfg.feature, workers, snr_db,
                          derive_seed(trial_seed, "awgn", "train"));
  fsx.test = extract_all(corpus.test, cfg.feature, workers, snr_db,
                         derive_seed(trial_seed, "awgn", "test"));
  for (const auto& c : corpus.train) {
    fsx.train_labels.push_back(c.label);
    fsx.train_keys.push_back(c.speaker_id);
  }
  for (const auto& c : corpus.test) fsx.test_labels.push_back(c.label);
  return fsx;
}

inline json matrix_to_json(const TransitionMatrix& q) {
  json rows = json::array();
  for (std::size_t i = 0; i < q.classes(); ++i) {
    const auto r = q.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return rows;
}

}  // namespace detail

/// Assembles the federated dataset of one trial from extracted features.
struct TrialData {
  FederatedDataset dataset;
  std::optional<NormStats> norm;
  std::optional<TransitionMatrix> q;
};

inline TrialData build_trial_dataset(const detail::FeatureSet& features,
                                     const ExperimentConfig& cfg, std::uint64_t trial_seed) {
  TrialData td;
  std::vector<FeatureMatrix> train = features.train, test = features.test;
  if (cfg.normalize) {
    auto n = znormalize(train, test);
    train = std::move(n.train);
    test = std::move(n.others);
    td.norm = std::move(n.stats);
  }
  auto& ds = td.dataset;
  ds.n_classes = features.n_classes;
  for (std::size_t i = 0; i < test.size(); ++i)
    ds.test_set.push_back({std::move(test[i]), features.test_labels[i]});
  if (cfg.partition.scheme == PartitionScheme::by_key) {
    std::vector<KeyedExample> keyed;
    keyed.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
      keyed.push_back({std::move(train[i]), features.train_labels[i], features.train_keys[i]});
    ds.clients = partition_by_key(std::move(keyed));
  } else {
    std::vector<Example> plain;
    plain.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
      plain.push_back({std::move(train[i]), features.train_labels[i]});
    DirichletSpec spec{cfg.partition.n_clients, cfg.partition.alpha,
                       cfg.partition.min_per_client, derive_seed(trial_seed, "dirichlet")};
    ds.clients = dirichlet_partition(std::move(plain), spec);
  }
  if (cfg.corruption.label_errors) {
    const auto& le = *cfg.corruption.label_errors;
    try {
      td.q = gen_transition_matrix(
          ds.n_classes, {le.error_ratio, le.error_sparsity, derive_seed(trial_seed, "q")});
    } catch (const Error& e) {
      fail(ErrorCode::ConfigError, std::string("corruption: ") + e.what());
    }
    ds = apply_label_errors(ds, *td.q, derive_seed(trial_seed, "labels"));
  }
  return td;
}

/// Runs every trial, writing outputs under cfg.output_dir as it goes.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  validate_config(cfg);
  fs::create_directories(cfg.output_dir);
  ExperimentResult result;
  result.config_hash = config_hash(cfg);
  const json resolved = config_to_json(cfg);
  {
    std::ofstream out(cfg.output_dir / "config.json");
    out << resolved.dump(2) << '\n';
  }

  std::optional<detail::AudioCorpus> audio;
  std::optional<detail::FeatureSet> clean_features;
  if (auto* f = std::get_if<FeatureDirSource>(&cfg.dataset)) {
    clean_features = detail::load_feature_source(*f);
  } else {
    audio = detail::load_audio_corpus(cfg);
    // Clean features do not depend on the trial seed; extract them once.
    if (!cfg.corruption.snr_db)
      clean_features = detail::featurize(*audio, cfg, opts.workers, std::nullopt, 0);
  }

  json meta;
  meta["config_hash"] = result.config_hash;
  meta["f1_averaging"] = "macro";
  meta["config"] = resolved;
  meta["trials"] = json::array();
  auto write_meta = [&] {
    std::ofstream out(cfg.output_dir / "metadata.json");
    out << meta.dump(2) << '\n';
  };

  for (std::size_t t = 0; t < cfg.n_seeds; ++t) {
    const std::uint64_t trial_seed = cfg.fed.master_seed + t;
    if (opts.log) *opts.log << "[" << cfg.name << "] trial " << t << " seed " << trial_seed << '\n';
    detail::FeatureSet noisy;
    const detail::FeatureSet* features = clean_features ? &*clean_features : nullptr;
    if (!features) {
      noisy = detail::featurize(*audio, cfg, opts.workers, cfg.corruption.snr_db, trial_seed);
      features = &noisy;
    }
    TrialData td = build_trial_dataset(*features, cfg, trial_seed);

    json tmeta = {{"trial", t}, {"trial_seed", trial_seed},
                  {"n_clients", td.dataset.clients.size()},
                  {"n_train", td.dataset.train_size()},
                  {"n_test", td.dataset.test_set.size()}};
    if (td.norm) tmeta["norm_stats"] = {{"mean", td.norm->mean}, {"std", td.norm->std}};
    if (td.q) tmeta["transition_matrix"] = detail::matrix_to_json(*td.q);
    meta["trials"].push_back(tmeta);
    write_meta();

    ModelArch arch = cfg.arch;
    arch.input_dims = td.dataset.test_set.front().features.cols();
    arch.n_classes = td.dataset.n_classes;
    FedConfig fed = cfg.fed;
    fed.master_seed = trial_seed;

    const fs::path jsonl = cfg.output_dir / ("seed_" + std::to_string(t) + ".jsonl");
    std::ofstream log(jsonl, std::ios::binary | std::ios::trunc);
    if (!log) fail(ErrorCode::IoError, "cannot write " + jsonl.string());
    auto fr = run_federation(
        td.dataset, arch, fed, derive_seed(trial_seed, "init"),
        [&](const RoundRecord& r) { log << record_to_json(r).dump() << '\n' << std::flush; },
        opts.workers);
    {
      std::ofstream params(cfg.output_dir / ("seed_" + std::to_string(t) + ".params"));
      write_params(params, fr.final_params);
    }
    TrialResult tr;
    tr.index = t;
    tr.trial_seed = trial_seed;
    tr.final_accuracy = fr.records.back().test_accuracy;
    tr.final_macro_f1 = fr.records.back().test_macro_f1;
    tr.records = std::move(fr.records);
    if (opts.log)
      *opts.log << "[" << cfg.name << "] trial " << t << " final accuracy "
                << tr.final_accuracy << '\n';
    result.trials.push_back(std::move(tr));
  }

  std::vector<std::vector<RoundRecord>> trials;
  for (const auto& t : result.trials) trials.push_back(t.records);
  std::optional<std::vector<std::vector<RoundRecord>>> baseline;
  if (cfg.baseline_dir) baseline = read_seed_records(*cfg.baseline_dir);
  result.rows = summarize_trials(cfg, result.config_hash, trials, baseline ? &*baseline : nullptr);
  write_summary_csv(cfg.output_dir / "summary.csv", result.rows);
  return result;
}

}  // namespace fedaudio
