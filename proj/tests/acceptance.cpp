// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any selected criterion fails. `--only N` runs a single one.

#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"

#include "fedaudio/runner.hpp"
#include "test_util.hpp"

using namespace fedaudio;
using namespace fedaudio::testing;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr double kAggTol = 1e-12;
constexpr double kRowSumTol = 1e-12;
constexpr double kRatioRoundTrip = 1e-15;
constexpr double kFlipTol = 0.01;
constexpr double kSnrTol = 0.1;
constexpr double kCleanAccuracy = 0.9;
constexpr double kCleanSeconds = 300.0;
constexpr double kTarget = 0.8;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Batch random_batch(const ModelArch& arch, std::vector<FeatureMatrix>& xs, std::size_t n,
                   std::size_t frames, std::uint64_t seed) {
  Rng rng(seed);
  xs.clear();
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_matrix(frames + i, arch.input_dims, rng));
  Batch b;
  for (std::size_t i = 0; i < n; ++i) b.add(xs[i], i % arch.n_classes);
  return b;
}

ParamVector random_params(const ModelArch& arch, Rng& rng) {
  ParamVector p = init_params(arch, rng());
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : p.values) v = n(rng);
  return p;
}

bool bit_identical(const ParamVector& a, const ParamVector& b) {
  return a.values.size() == b.values.size() &&
         std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) == 0;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string rounds_str(std::optional<std::size_t> r) {
  return r ? std::to_string(*r) : std::string("never");
}

// Absent counts as later than any present value.
bool rounds_le(std::optional<std::size_t> a, std::optional<std::size_t> b) {
  if (!b) return true;
  return a && *a <= *b;
}

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<FeatureMatrix> xs;
  const auto mlp = toy_mlp();
  const auto r1 = grad_check(toy_params(mlp, 4), mlp, random_batch(mlp, xs, 3, 5, 7), 1e-5, kGradTol);
  const auto cg = toy_conv_gru();
  const auto r2 = grad_check(toy_params(cg, 5), cg, random_batch(cg, xs, 2, 7, 8), 1e-5, kGradTol);
  const double secs = seconds_since(t0);
  return {r1.failures == 0 && r2.failures == 0 && secs < kGradSeconds,
          fmt("mlp %zu/%zu ok (worst %.2e), conv_gru %zu/%zu ok (worst %.2e), %.1f s",
              r1.coordinates - r1.failures, r1.coordinates, r1.worst,
              r2.coordinates - r2.failures, r2.coordinates, r2.worst, secs)};
}

Outcome fedavg_oracle() {
  Rng rng(11);
  ModelArch arch;
  arch.input_dims = 16;
  arch.n_classes = 4;
  arch.hidden = {12};
  std::uniform_int_distribution<std::size_t> count(1, 1000);
  std::vector<ClientUpdate> updates;
  for (int i = 0; i < 7; ++i) updates.push_back({random_params(arch, rng), count(rng)});

  const auto got = fedavg_aggregate(updates);
  long double total = 0;
  for (const auto& u : updates) total += u.sample_count;
  double worst = 0.0;
  for (std::size_t i = 0; i < got.values.size(); ++i) {
    long double acc = 0;
    for (const auto& u : updates) acc += static_cast<long double>(u.sample_count) * u.params.values[i];
    worst = std::max(worst, std::abs(got.values[i] - static_cast<double>(acc / total)));
  }
  double worst_shuffle = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = updates;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = fedavg_aggregate(shuffled);
    for (std::size_t i = 0; i < got.values.size(); ++i)
      worst_shuffle = std::max(worst_shuffle, std::abs(again.values[i] - got.values[i]));
  }
  return {worst <= kAggTol && worst_shuffle <= kAggTol,
          fmt("%zu coordinates, max |oracle diff| %.2e, max |shuffle diff| %.2e",
              got.values.size(), worst, worst_shuffle)};
}

Outcome fedopt_fixpoint() {
  Rng rng(12);
  ModelArch arch;
  arch.input_dims = 10;
  arch.n_classes = 3;
  arch.hidden = {8};
  FedConfig cfg;
  cfg.optimizer = ServerOptimizer::fedopt;
  cfg.server_lr = 0.01;

  bool zero_delta = true;
  ServerState s = ServerState::fresh(random_params(arch, rng));
  const ParamVector start = s.global;
  for (int step = 0; step < 5; ++step) {
    s = fedopt_step(std::move(s), start, cfg);
    zero_delta = zero_delta && bit_identical(s.global, start);
  }

  bool zero_lr = true;
  cfg.server_lr = 0.0;
  ServerState t = ServerState::fresh(random_params(arch, rng));
  for (int step = 0; step < 5; ++step) {
    // Warm the moments first so the check is not only from a fresh state.
    t.adam_m = random_params(arch, rng);
    t.adam_v = random_params(arch, rng);
    for (double& v : t.adam_v.values) v = std::abs(v);
    const ParamVector before = t.global;
    t = fedopt_step(std::move(t), random_params(arch, rng), cfg);
    zero_lr = zero_lr && bit_identical(t.global, before);
  }
  return {zero_delta && zero_lr,
          fmt("zero delta identical: %s, server_lr 0 identical: %s", zero_delta ? "yes" : "no",
              zero_lr ? "yes" : "no")};
}

Outcome q_generator() {
  Rng rng(13);
  std::uniform_int_distribution<std::size_t> kdist(2, 20);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t checked = 0, bad = 0;
  double worst_row = 0.0, worst_sparsity = 0.0;
  std::string first_bad;
  while (checked < 1000) {
    const std::size_t k = kdist(rng);
    LabelErrorSpec spec{unit(rng), unit(rng), rng()};
    if (spec.error_ratio == 0.0) continue;
    try {
      check_label_error_spec(k, spec);
    } catch (const Error&) {
      continue;
    }
    ++checked;
    const auto q = gen_transition_matrix(k, spec);
    bool ok = true;
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < k; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        sum += q(i, j);
        ok = ok && q(i, j) >= 0.0 && q(i, j) <= 1.0;
        if (i != j && q(i, j) == 0.0) ++zeros;
      }
      worst_row = std::max(worst_row, std::abs(sum - 1.0));
      ok = ok && std::abs(sum - 1.0) <= kRowSumTol && q(i, i) == 1.0 - spec.error_ratio;
    }
    const double cells = static_cast<double>(k * (k - 1));
    const double realized = static_cast<double>(zeros) / cells;
    const double miss = std::abs(realized - spec.error_sparsity);
    worst_sparsity = std::max(worst_sparsity, miss * cells);
    ok = ok && miss <= 1.0 / cells;

    const auto stats = q_stats(q);
    ok = ok && stats.error_sparsity == realized;
    for (double r : stats.error_ratio) ok = ok && std::abs(r - spec.error_ratio) <= kRatioRoundTrip;
    if (!ok && bad++ == 0) first_bad = fmt(" first failure K=%zu ratio=%g sparsity=%g", k,
                                           spec.error_ratio, spec.error_sparsity);
  }
  return {bad == 0, fmt("%zu specs, %zu failed, worst row-sum error %.1e, worst sparsity miss "
                        "%.2f cells%s",
                        checked, bad, worst_row, worst_sparsity, first_bad.c_str())};
}

Outcome label_noise_statistics() {
  const std::size_t per_class = 100000;
  double worst = 0.0;
  std::string specs;
  for (const auto& [k, ratio, sparsity] :
       {std::tuple<std::size_t, double, double>{4, 0.3, 0.4}, {10, 0.5, 0.2}}) {
    const auto q = gen_transition_matrix(k, {ratio, sparsity, 21});
    FederatedDataset ds;
    ds.n_classes = k;
    auto& shard = ds.clients["c"];
    shard.resize(per_class * k);
    for (std::size_t i = 0; i < shard.size(); ++i) shard[i].label = i % k;
    const auto noisy = apply_label_errors(ds, q, 22);
    std::vector<std::size_t> counts(k * k, 0);
    const auto& out = noisy.clients.at("c");
    for (std::size_t i = 0; i < out.size(); ++i) ++counts[(i % k) * k + out[i].label];
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        worst = std::max(worst, std::abs(static_cast<double>(counts[i * k + j]) / per_class - q(i, j)));
    specs += fmt("%sK=%zu ratio %g sparsity %g", specs.empty() ? "" : "; ", k, ratio, sparsity);
  }
  return {worst < kFlipTol, fmt("%s: L-inf %.4f", specs.c_str(), worst)};
}

Outcome snr_fidelity() {
  const AudioClip clip = sine(440.0, 1.0, 16000);
  double worst = 0.0;
  std::size_t misses = 0;
  std::string per_target;
  for (double target : {10.0, 20.0, 30.0}) {
    double target_worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto noisy = inject_awgn(clip, {target, derive_seed(seed, "snr", static_cast<int>(target))});
      const double miss = std::abs(measure_snr(clip, noisy) - target);
      target_worst = std::max(target_worst, miss);
      misses += miss > kSnrTol;
    }
    worst = std::max(worst, target_worst);
    per_target += fmt("%s%g dB worst %.3f", per_target.empty() ? "" : ", ", target, target_worst);
  }
  return {misses == 0, fmt("%s; %zu of 60 outside +/-%.1f dB", per_target.c_str(), misses, kSnrTol)};
}

// ---------------------------------------------------------------------------
// End-to-end runs

struct RunSummary {
  std::vector<double> finals;
  std::optional<std::size_t> rounds;  // 3-seed median rounds to kTarget
  double seconds = 0.0;
  std::string csv;

  double median_final() const { return median(finals); }
  std::string str() const {
    return fmt("acc %.3f, rounds %s", median_final(), rounds_str(rounds).c_str());
  }
};

class Runs {
 public:
  Runs(fs::path config_dir, fs::path work_dir)
      : config_dir_(std::move(config_dir)), work_dir_(std::move(work_dir)) {}

  const RunSummary& get(const std::string& name, const std::string& tag = "") {
    const std::string key = name + tag;
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    ExperimentConfig cfg = parse_config(config_dir_ / (name + ".json"));
    cfg.output_dir = work_dir_ / key;
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = run_experiment(cfg);
    RunSummary s;
    s.seconds = seconds_since(t0);
    std::vector<std::vector<RoundRecord>> trials;
    for (const auto& t : res.trials) {
      s.finals.push_back(t.final_accuracy);
      trials.push_back(t.records);
    }
    s.rounds = median_rounds(trials, kTarget, TargetMetric::accuracy);
    std::ifstream in(cfg.output_dir / "summary.csv", std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    s.csv = os.str();
    return cache_.emplace(key, std::move(s)).first->second;
  }

 private:
  fs::path config_dir_, work_dir_;
  std::map<std::string, RunSummary> cache_;
};

Outcome dirichlet_heterogeneity(Runs& runs) {
  auto mean_entropy = [](double alpha) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::vector<Example> examples(4000);
      for (std::size_t i = 0; i < examples.size(); ++i) examples[i].label = i % 4;
      DirichletSpec spec;
      spec.n_clients = 20;
      spec.alpha = alpha;
      spec.seed = seed;
      total += mean_client_entropy(dirichlet_partition(std::move(examples), spec), 4);
    }
    return total / 5.0;
  };
  const double h01 = mean_entropy(0.1), h05 = mean_entropy(0.5);
  const auto& a01 = runs.get("dirichlet_a01");
  const auto& a05 = runs.get("dirichlet_a05");
  return {h01 < h05 && a01.median_final() < a05.median_final(),
          fmt("entropy alpha 0.1 %.3f vs 0.5 %.3f nats; end-to-end alpha 0.1 %s vs 0.5 %s", h01,
              h05, a01.str().c_str(), a05.str().c_str())};
}

Outcome clean_run(Runs& runs) {
  const auto& c = runs.get("clean");
  const double worst = *std::min_element(c.finals.begin(), c.finals.end());
  return {worst >= kCleanAccuracy && c.seconds < kCleanSeconds,
          fmt("lowest seed accuracy %.3f over %zu seeds, %.1f s", worst, c.finals.size(),
              c.seconds)};
}

Outcome noise_trend(Runs& runs) {
  const auto& clean = runs.get("clean");
  const auto& s30 = runs.get("snr30");
  const auto& s10 = runs.get("snr10");
  const double a0 = clean.median_final(), a30 = s30.median_final(), a10 = s10.median_final();
  const bool lower = a10 < a0;
  const bool slower = clean.rounds && (!s10.rounds || *s10.rounds > *clean.rounds);
  const bool between = a10 <= a30 && a30 <= a0;
  return {lower && slower && between, fmt("clean %s; 30 dB %s; 10 dB %s", clean.str().c_str(),
                                          s30.str().c_str(), s10.str().c_str())};
}

Outcome label_trend(Runs& runs) {
  const auto& e1 = runs.get("labels_er01");
  const auto& e3 = runs.get("labels_er03");
  const auto& e5 = runs.get("labels_er05");
  const auto& s10 = runs.get("snr10");
  const auto& both = runs.get("combined_snr10_er03");
  const bool acc = e1.median_final() >= e3.median_final() && e3.median_final() >= e5.median_final();
  const bool rounds = rounds_le(e1.rounds, e3.rounds) && rounds_le(e3.rounds, e5.rounds);
  const bool combined = both.median_final() <= s10.median_final() &&
                        both.median_final() <= e3.median_final();
  return {acc && rounds && combined,
          fmt("ER 0.1 %s; 0.3 %s; 0.5 %s; 10 dB + ER 0.3 %s", e1.str().c_str(), e3.str().c_str(),
              e5.str().c_str(), both.str().c_str())};
}

Outcome determinism(Runs& runs) {
  bool same = true;
  std::string names;
  for (const std::string name : {"clean", "combined_snr10_er03"}) {
    same = same && runs.get(name).csv == runs.get(name, "_repeat").csv &&
           !runs.get(name).csv.empty();
    names += (names.empty() ? "" : ", ") + name;
  }
  return {same, fmt("%s: summary.csv %s", names.c_str(), same ? "byte-identical" : "differs")};
}

Outcome sampled_counts() {
  const std::size_t n = 2112;
  const std::size_t m5 = sampled_count(n, 0.05), m10 = sampled_count(n, 0.10),
                    m20 = sampled_count(n, 0.20);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  Rng rng(1);
  const bool drawn = sample_clients(ids, 0.05, rng).size() == m5 &&
                     sample_clients(ids, 0.20, rng).size() == m20;
  return {m5 == 106 && m20 == 424 && drawn,
          fmt("n=2112: 5%% -> %zu (published 106), 10%% -> %zu (published 212), "
              "20%% -> %zu (published 424)",
              m5, m10, m20)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedaudio acceptance checks"};
  int only = 0;
  std::string config_dir = FEDAUDIO_CONFIG_DIR;
  std::string work_dir;
  app.add_option("--only", only, "run a single criterion (1-12)")->check(CLI::Range(1, 12));
  app.add_option("--config-dir", config_dir, "directory holding the experiment configs");
  app.add_option("--work-dir", work_dir, "keep run outputs here instead of a temp dir");
  CLI11_PARSE(app, argc, argv);

  std::optional<TempDir> tmp;
  if (work_dir.empty()) {
    tmp.emplace();
    work_dir = tmp->path().string();
  }
  Runs runs(config_dir, work_dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_check},
      {"FedAvg oracle", fedavg_oracle},
      {"FedOPT fixpoint", fedopt_fixpoint},
      {"Q generator", q_generator},
      {"label-noise statistics", label_noise_statistics},
      {"SNR fidelity", snr_fidelity},
      {"Dirichlet heterogeneity", [&] { return dirichlet_heterogeneity(runs); }},
      {"clean end-to-end run", [&] { return clean_run(runs); }},
      {"data-noise trend", [&] { return noise_trend(runs); }},
      {"label-error trend", [&] { return label_trend(runs); }},
      {"determinism", [&] { return determinism(runs); }},
      {"sampled-client counts", sampled_counts},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
