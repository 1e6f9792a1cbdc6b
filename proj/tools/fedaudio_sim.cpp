// SPDX-License-Identifier: Apache-2.0
//
// fedaudio_sim: command-line front end for the simulation harness.
//   run <config>             run an experiment described by a JSON config
//   partition <manifest>     write a per-client partition report as CSV
//   corrupt <manifest>       write noisy WAVs, a relabeled manifest and Q
//   features <wav>           write a log-Mel feature file
//   report <dir>             summarize seed_*.jsonl files from a run
// Exit status: 0 on success, 2 on configuration errors, 1 otherwise.

#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "fedaudio/runner.hpp"

namespace fa = fedaudio;
namespace fs = std::filesystem;

namespace {

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::binary);
  if (!file) fa::fail(fa::ErrorCode::IoError, "cannot write " + path);
  return file;
}

std::size_t class_count(const std::vector<fa::ManifestEntry>& entries, std::size_t declared) {
  std::size_t k = 0;
  for (const auto& e : entries) k = std::max(k, e.label + 1);
  if (declared) {
    fa::require(k <= declared, fa::ErrorCode::UnknownLabel,
                "manifest labels exceed --n-classes");
    return declared;
  }
  return k;
}

int cmd_run(const std::string& config, const std::string& out_dir, bool quiet) {
  auto cfg = fa::parse_config(config);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  fa::RunOptions opts;
  if (!quiet) opts.log = &std::cerr;
  const auto result = fa::run_experiment(cfg, opts);
  std::cout << fa::summary_csv_header() << '\n';
  for (const auto& row : result.rows) std::cout << fa::format_csv_row(row) << '\n';
  return 0;
}

struct PartitionArgs {
  std::string manifest;
  std::string scheme = "by_key";
  double alpha = 0.5;
  std::size_t n_clients = 50;
  std::size_t min_per_client = 1;
  std::uint64_t seed = 0;
  std::size_t n_classes = 0;
  std::string out;
};

int cmd_partition(const PartitionArgs& a) {
  const auto entries = fa::load_manifest(a.manifest);
  fa::require(!entries.empty(), fa::ErrorCode::EmptyInput, "manifest is empty");
  const std::size_t k = class_count(entries, a.n_classes);
  std::map<std::string, std::vector<std::size_t>> counts;
  if (a.scheme == "by_key") {
    for (const auto& e : entries) {
      auto& c = counts[e.client_key];
      c.resize(k, 0);
      ++c[e.label];
    }
  } else if (a.scheme == "dirichlet") {
    std::vector<std::size_t> labels;
    for (const auto& e : entries) labels.push_back(e.label);
    const auto shards =
        fa::dirichlet_assign(labels, {a.n_clients, a.alpha, a.min_per_client, a.seed});
    for (std::size_t s = 0; s < shards.size(); ++s) {
      const auto& members = shards[s];
      auto& c = counts[fa::dirichlet_client_id(s)];
      c.resize(k, 0);
      for (auto i : members) ++c[labels[i]];
    }
  } else {
    fa::fail(fa::ErrorCode::ConfigError, "--scheme: expected by_key or dirichlet");
  }
  std::ofstream file;
  auto& out = open_out(a.out, file);
  out << "client_id,size";
  for (std::size_t c = 0; c < k; ++c) out << ",class_" << c;
  out << '\n';
  for (const auto& [id, c] : counts) {
    std::size_t size = 0;
    for (auto v : c) size += v;
    out << id << ',' << size;
    for (auto v : c) out << ',' << v;
    out << '\n';
  }
  return 0;
}

struct CorruptArgs {
  std::string manifest;
  std::string out_dir;
  std::optional<double> snr_db;
  std::optional<double> error_ratio;
  std::optional<double> error_sparsity;
  std::uint64_t seed = 0;
  std::size_t n_classes = 0;
};

int cmd_corrupt(const CorruptArgs& a) {
  if (a.error_ratio.has_value() != a.error_sparsity.has_value())
    fa::fail(fa::ErrorCode::ConfigError, "--error-ratio and --error-sparsity go together");
  auto entries = fa::load_manifest(a.manifest);
  fa::require(!entries.empty(), fa::ErrorCode::EmptyInput, "manifest is empty");
  const fs::path out_dir = a.out_dir;
  fs::create_directories(out_dir / "audio");
  const std::size_t k = class_count(entries, a.n_classes);

  std::optional<fa::TransitionMatrix> q;
  if (a.error_ratio) {
    try {
      q = fa::gen_transition_matrix(
          k, {*a.error_ratio, *a.error_sparsity, fa::derive_seed(a.seed, "q")});
    } catch (const fa::Error& e) {
      fa::fail(fa::ErrorCode::ConfigError, e.what());
    }
  }

  // Label flips reuse the dataset-level routine: one stream per client key.
  std::vector<std::size_t> labels(entries.size());
  if (q) {
    fa::FederatedDataset ds;
    ds.n_classes = k;
    std::map<std::string, std::vector<std::size_t>> index;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ds.clients[entries[i].client_key].push_back({fa::FeatureMatrix(1, 1), entries[i].label});
      index[entries[i].client_key].push_back(i);
    }
    const auto noisy = fa::apply_label_errors(ds, *q, fa::derive_seed(a.seed, "labels"));
    for (const auto& [id, shard] : noisy.clients)
      for (std::size_t j = 0; j < shard.size(); ++j) labels[index[id][j]] = shard[j].label;
  } else {
    for (std::size_t i = 0; i < entries.size(); ++i) labels[i] = entries[i].label;
  }

  std::vector<fa::ManifestEntry> out_entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu_", i);
    const fs::path dst = out_dir / "audio" / (name + entries[i].path.filename().string());
    auto clip = fa::load_wav(entries[i].path);
    if (a.snr_db) clip = fa::inject_awgn(clip, {*a.snr_db, fa::derive_seed(a.seed, "awgn", i)});
    fa::write_wav(dst, clip);
    out_entries.push_back({dst, labels[i], entries[i].client_key});
  }
  fa::write_manifest(out_dir / "manifest.tsv", out_entries);

  std::ofstream qcsv(out_dir / "q.csv", std::ios::binary);
  const auto qm = q ? *q : fa::TransitionMatrix::identity(k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (j) qcsv << ',';
      qcsv << fa::detail::format_real(qm(i, j));
    }
    qcsv << '\n';
  }
  return 0;
}

struct FeaturesArgs {
  std::string wav;
  std::string out;
  std::size_t label = 0;
  std::string client = "client";
  fa::FeatureConfig cfg;
};

int cmd_features(const FeaturesArgs& a) {
  const auto clip = fa::load_wav(a.wav);
  a.cfg.validate();
  fa::FeatureExample ex{fa::extract_mel(clip, a.cfg), a.label, a.client};
  if (a.out.empty() || a.out == "-") {
    fa::write_feature_file(std::cout, ex);
  } else {
    fa::write_feature_file(fs::path(a.out), ex);
  }
  return 0;
}

int cmd_report(const std::string& dir, const std::vector<double>& targets,
               const std::string& baseline, const std::string& out_path) {
  fa::ExperimentConfig cfg;
  std::string id = fs::path(dir).filename().string();
  const fs::path meta = fs::path(dir) / "metadata.json";
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    const auto j = fa::json::parse(in);
    cfg = fa::parse_config_json(j.at("config"));
    id = j.at("config_hash").get<std::string>();
  }
  cfg.targets = targets;
  const auto trials = fa::read_seed_records(dir);
  std::optional<std::vector<std::vector<fa::RoundRecord>>> base;
  if (!baseline.empty()) base = fa::read_seed_records(baseline);
  const auto rows = fa::summarize_trials(cfg, id, trials, base ? &*base : nullptr);
  std::ofstream file;
  auto& out = open_out(out_path, file);
  out << fa::summary_csv_header() << '\n';
  for (const auto& r : rows) out << fa::format_csv_row(r) << '\n';
  for (const auto& r : rows)
    if (r.target)
      std::cerr << r.metric_name << " @ " << *r.target << ": " << r.rounds.render() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated audio classification simulator"};
  app.require_subcommand(1);

  std::string config, run_out;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  run->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  run->add_option("--output-dir", run_out, "Override output_dir from the config");
  run->add_flag("-q,--quiet", quiet, "No progress output");

  PartitionArgs pa;
  auto* part = app.add_subcommand("partition", "Partition report for a manifest");
  part->add_option("manifest", pa.manifest)->required()->check(CLI::ExistingFile);
  part->add_option("--scheme", pa.scheme)->check(CLI::IsMember({"by_key", "dirichlet"}));
  part->add_option("--alpha", pa.alpha);
  part->add_option("--n-clients", pa.n_clients);
  part->add_option("--min-per-client", pa.min_per_client);
  part->add_option("--seed", pa.seed);
  part->add_option("--n-classes", pa.n_classes);
  part->add_option("-o,--out", pa.out, "CSV path (default stdout)");

  CorruptArgs ca;
  auto* corrupt = app.add_subcommand("corrupt", "Inject AWGN and label errors into a manifest");
  corrupt->add_option("manifest", ca.manifest)->required()->check(CLI::ExistingFile);
  corrupt->add_option("--out-dir", ca.out_dir)->required();
  corrupt->add_option("--snr-db", ca.snr_db);
  corrupt->add_option("--error-ratio", ca.error_ratio);
  corrupt->add_option("--error-sparsity", ca.error_sparsity);
  corrupt->add_option("--seed", ca.seed);
  corrupt->add_option("--n-classes", ca.n_classes);

  FeaturesArgs fa_args;
  auto* feat = app.add_subcommand("features", "Extract log-Mel features from a WAV file");
  feat->add_option("wav", fa_args.wav)->required()->check(CLI::ExistingFile);
  feat->add_option("-o,--out", fa_args.out, "Feature file path (default stdout)");
  feat->add_option("--label", fa_args.label);
  feat->add_option("--client", fa_args.client);
  feat->add_option("--frame-length", fa_args.cfg.frame_length);
  feat->add_option("--hop-ms", fa_args.cfg.hop_ms);
  feat->add_option("--n-mels", fa_args.cfg.n_mels);
  feat->add_option("--log-floor", fa_args.cfg.log_floor);

  std::string report_dir, baseline, report_out;
  std::vector<double> targets;
  auto* report = app.add_subcommand("report", "Summarize per-seed JSONL logs");
  report->add_option("dir", report_dir, "Directory with seed_*.jsonl")->required();
  report->add_option("--target", targets, "Metric target(s)")->required();
  report->add_option("--baseline", baseline, "Baseline run directory");
  report->add_option("-o,--out", report_out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(config, run_out, quiet);
    if (*part) return cmd_partition(pa);
    if (*corrupt) return cmd_corrupt(ca);
    if (*feat) return cmd_features(fa_args);
    if (*report) return cmd_report(report_dir, targets, baseline, report_out);
  } catch (const fa::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == fa::ErrorCode::ConfigError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
