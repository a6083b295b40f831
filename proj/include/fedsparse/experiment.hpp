#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsparse/checkpoint.hpp"
#include "fedsparse/config.hpp"
#include "fedsparse/dataset.hpp"
#include "fedsparse/detector.hpp"
#include "fedsparse/evaluation.hpp"
#include "fedsparse/federation.hpp"
#include "fedsparse/sparsifier.hpp"

namespace fedsparse {

/// A run that started but could not finish (exit status 3 at the command line).
class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputRootEnv = "FEDSPARSE_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Histograms of |gamma|

struct GammaHistogram {
  double max_abs = 0.0;
  std::vector<std::size_t> counts;

  double bin_lower(std::size_t i) const { return max_abs * static_cast<double>(i) / static_cast<double>(counts.size()); }
  double bin_upper(std::size_t i) const { return max_abs * static_cast<double>(i + 1) / static_cast<double>(counts.size()); }
};

/// Counts of |gamma| over the prunable channels, `bins` equal bins spanning [0, max|gamma|].
/// The maximum lands in the last bin; if every gamma is zero all counts go to bin 0.
inline GammaHistogram gamma_histogram(const ModelParams& model, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("gamma_histogram: need at least 2 bins");
  std::vector<double> values;
  for (const ChannelRef& ref : prunable_channels(model.config)) {
    values.push_back(std::abs(model.blocks[ref.block].bn.gamma[ref.channel]));
  }
  GammaHistogram h;
  h.counts.assign(bins, 0);
  for (double v : values) h.max_abs = std::max(h.max_abs, v);
  for (double v : values) {
    std::size_t bin = 0;
    if (h.max_abs > 0.0) {
      bin = static_cast<std::size_t>(v / h.max_abs * static_cast<double>(bins));
      bin = std::min(bin, bins - 1);
    }
    ++h.counts[bin];
  }
  return h;
}

/// Fraction of prunable channels with |gamma| below `cutoff`.
inline double small_gamma_fraction(const ModelParams& model, double cutoff) {
  const auto refs = prunable_channels(model.config);
  std::size_t small = 0;
  for (const ChannelRef& ref : refs) {
    if (std::abs(model.blocks[ref.block].bn.gamma[ref.channel]) < cutoff) ++small;
  }
  return static_cast<double>(small) / static_cast<double>(refs.size());
}

// ---------------------------------------------------------------------------
// Data

struct ExperimentData {
  std::shared_ptr<const std::vector<TrainingExample>> train;
  std::vector<TrainingExample> test;
};

inline SceneSpec test_scene(const SceneSpec& train) {
  SceneSpec s = train;
  s.seed = derive_seed(train.seed, 0x7e57);
  return s;
}

/// Pixels pass through float32 so in-memory runs match runs over files written by gen-data.
inline std::vector<Sample> round_to_float(std::vector<Sample> samples) {
  for (auto& s : samples) {
    for (double& v : s.image.data()) v = static_cast<double>(static_cast<float>(v));
  }
  return samples;
}

inline void write_dataset(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  write_split(dir, "train", generate(cfg.scene, cfg.train_images));
  write_split(dir, "test", generate(test_scene(cfg.scene), cfg.test_images));
}

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  std::vector<Sample> train, test;
  if (cfg.data_dir.empty()) {
    train = round_to_float(generate(cfg.scene, cfg.train_images));
    test = round_to_float(generate(test_scene(cfg.scene), cfg.test_images));
  } else {
    train = read_split(cfg.data_dir, "train");
    test = read_split(cfg.data_dir, "test");
  }
  if (train.size() < cfg.client_count()) {
    throw DatasetError("cannot split " + std::to_string(train.size()) + " images across " +
                       std::to_string(cfg.client_count()) + " clients");
  }
  ExperimentData data;
  data.train = std::make_shared<const std::vector<TrainingExample>>(make_examples(train, cfg.detector));
  data.test = make_examples(test, cfg.detector);
  return data;
}

/// Initial global model, client registry and partitions. Depends only on the seed,
/// so runs of different methods with the same seed start identically.
inline ServerState make_server(const ExperimentConfig& cfg, const ExperimentData& data) {
  std::mt19937_64 split_rng(derive_seed(cfg.seed, 0xda7a));
  const auto parts = partition_dataset(data.train->size(), cfg.client_count(), split_rng);
  std::vector<ClientState> clients;
  for (std::size_t k = 0; k < cfg.client_count(); ++k) {
    ClientState c;
    c.client_id = k;
    c.sparsity = SparsityRate(cfg.sparsity[k]);
    c.data = data.train;
    c.indices = parts[k];
    c.learning_rate = cfg.learning_rate;
    c.local_epochs = cfg.local_epochs;
    c.batch_size = cfg.batch_size;
    clients.push_back(std::move(c));
  }
  return ServerState(build_model(cfg.detector, derive_seed(cfg.seed, 0x1417)), std::move(clients),
                     cfg.sampling_fraction, cfg.seed);
}

// ---------------------------------------------------------------------------
// Running

inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  std::filesystem::path out = cfg.out.empty() ? std::filesystem::path("runs") / method_name(cfg.method)
                                              : std::filesystem::path(cfg.out);
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0' && out.is_relative()) {
    out = std::filesystem::path(root) / out;
  }
  return out;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunOptions {
  std::ostream* log = nullptr;
  std::function<void(std::size_t, const ClientUpdate&)> on_update;
};

struct ExperimentResult {
  std::filesystem::path out_dir;
  std::string config_hash;
  std::vector<RoundReport> reports;
  ModelParams final_model;
};

inline std::vector<std::string> metrics_header(std::size_t clients) {
  std::vector<std::string> h{"round", "method", "map50", "eval_loss", "bytes_saved_round", "bytes_saved_cumulative"};
  for (std::size_t k = 0; k < clients; ++k) h.push_back("pruned_count_" + std::to_string(k));
  h.push_back("config_hash");
  h.push_back("timestamp");
  return h;
}

namespace detail {

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) out += ',';
    out += fields[i];
  }
  return out + "\n";
}

inline nlohmann::json round_json(const RoundReport& r) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    nlohmann::json entry{{"client", c.client_id},
                         {"pruned_weights", c.pruned_weights},
                         {"pruned_channels", c.pruned_channels},
                         {"bytes_saved", c.bytes_saved},
                         {"failed", c.failed}};
    if (c.failed) entry["failure"] = c.failure;
    clients.push_back(entry);
  }
  return {{"round", r.round},
          {"map50", r.map50},
          {"eval_loss", r.eval_loss},
          {"bytes_saved_round", r.bytes_saved_round},
          {"bytes_saved_cumulative", r.bytes_saved_cumulative},
          {"sqrt_clamps", r.sqrt_clamps},
          {"clients", clients}};
}

}  // namespace detail

/// Runs every round and writes metrics.csv (one row per finished round, flushed as
/// it goes), gamma_histograms.csv, summary.json, config.txt and model.fwm.
/// Throws ExperimentError if a round fails; rows already written stay on disk.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  validate(cfg);
  ExperimentResult result;
  result.out_dir = resolve_output_dir(cfg);
  result.config_hash = config_hash(cfg);
  std::filesystem::create_directories(result.out_dir);
  {
    std::ofstream cfg_out(result.out_dir / "config.txt");
    cfg_out << serialize_config(cfg);
  }

  const ExperimentData data = prepare_data(cfg);
  ServerState server = make_server(cfg, data);
  const std::size_t prunable = prunable_channels(cfg.detector).size();

  std::ofstream metrics(result.out_dir / "metrics.csv");
  std::ofstream hist(result.out_dir / "gamma_histograms.csv");
  if (!metrics || !hist) throw ExperimentError("cannot write to " + result.out_dir.string());
  metrics << detail::csv_line(metrics_header(cfg.client_count())) << std::flush;
  hist << "round,bin,lower,upper,count\n";

  RoundOptions ropts;
  ropts.method = cfg.method;
  ropts.lambda = is_sparse(cfg.method) ? cfg.lambda : 0.0;
  ropts.loss = cfg.loss;
  ropts.eval = cfg.eval;
  ropts.parallel = cfg.parallel;
  ropts.test_set = &data.test;
  ropts.on_update = opts.on_update;

  nlohmann::json failures = nlohmann::json::array();
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundReport report;
    try {
      report = run_round(server, ropts);
    } catch (const std::exception& e) {
      throw ExperimentError("round " + std::to_string(server.round + 1) + " failed: " + e.what() + " (" +
                            std::to_string(result.reports.size()) + " rounds written to " +
                            (result.out_dir / "metrics.csv").string() + ")");
    }
    std::vector<std::string> row{std::to_string(report.round),          method_name(cfg.method),
                                 detail::format_double(report.map50),   detail::format_double(report.eval_loss),
                                 std::to_string(report.bytes_saved_round),
                                 std::to_string(report.bytes_saved_cumulative)};
    std::vector<std::size_t> pruned(cfg.client_count(), 0);
    for (const auto& c : report.clients) {
      pruned[c.client_id] = c.pruned_weights;
      if (c.failed) {
        failures.push_back({{"round", report.round}, {"client", c.client_id}, {"reason", c.failure}});
        if (opts.log) *opts.log << "round " << report.round << ": client " << c.client_id << " excluded: " << c.failure << "\n";
      }
    }
    for (std::size_t p : pruned) row.push_back(std::to_string(p));
    row.push_back(result.config_hash);
    row.push_back(utc_timestamp());
    metrics << detail::csv_line(row) << std::flush;

    const GammaHistogram h = gamma_histogram(server.global, cfg.histogram_bins);
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      hist << report.round << ',' << b << ',' << detail::format_double(h.bin_lower(b)) << ','
           << detail::format_double(h.bin_upper(b)) << ',' << h.counts[b] << '\n';
    }
    hist << std::flush;
    if (opts.log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "round %zu/%zu %s map50=%.2f eval_loss=%.4f bytes_saved=%lld\n", report.round,
                    cfg.rounds, method_name(cfg.method).c_str(), report.map50, report.eval_loss,
                    static_cast<long long>(report.bytes_saved_cumulative));
      *opts.log << buf << std::flush;
    }
    result.reports.push_back(std::move(report));
  }

  save_checkpoint(result.out_dir / "model.fwm", server.global);

  nlohmann::json config_doc = nlohmann::json::object();
  for (const auto& key : config_keys()) config_doc[key] = get_config_value(cfg, key);
  nlohmann::json rounds = nlohmann::json::array();
  double best = 0.0;
  for (const auto& r : result.reports) {
    rounds.push_back(detail::round_json(r));
    best = std::max(best, r.map50);
  }
  const RoundReport& last = result.reports.back();
  nlohmann::json summary{{"method", method_name(cfg.method)},
                         {"config_hash", result.config_hash},
                         {"config", config_doc},
                         {"rounds", cfg.rounds},
                         {"parameter_count", server.global.parameter_count()},
                         {"prunable_channels", prunable},
                         {"final_map50", last.map50},
                         {"best_map50", best},
                         {"final_eval_loss", last.eval_loss},
                         {"bytes_saved_total", last.bytes_saved_cumulative},
                         {"failures", failures},
                         {"per_round", rounds},
                         {"timestamp", utc_timestamp()}};
  std::ofstream(result.out_dir / "summary.json") << summary.dump(2) << '\n';
  result.final_model = std::move(server.global);
  return result;
}

// ---------------------------------------------------------------------------
// Comparing runs

struct MetricsTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ExperimentError("metrics table has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  std::vector<double> numbers(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    for (const auto& row : rows) out.push_back(detail::parse_double(row.at(c), name));
    return out;
  }
};

inline MetricsTable read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ExperimentError("cannot open " + path.string());
  MetricsTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (t.header.empty()) {
      t.header = std::move(fields);
    } else {
      if (fields.size() != t.header.size()) throw ExperimentError(path.string() + ": ragged row");
      t.rows.push_back(std::move(fields));
    }
  }
  if (t.header.empty()) throw ExperimentError(path.string() + " is empty");
  return t;
}

struct Comparison {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> map50;       // [run][round]
  std::vector<std::vector<double>> cumulative;  // [run][round]
  std::size_t rounds = 0;

  /// map50 of run `i` minus the first run, per round.
  std::vector<double> delta(std::size_t i) const {
    std::vector<double> d;
    for (std::size_t r = 0; r < rounds; ++r) d.push_back(map50[i][r] - map50[0][r]);
    return d;
  }
};

inline Comparison compare_runs(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ExperimentError("compare needs at least two run directories");
  Comparison cmp;
  for (std::size_t i = 0; i < run_dirs.size(); ++i) {
    const MetricsTable t = read_metrics(run_dirs[i] / "metrics.csv");
    if (i == 0) {
      cmp.rounds = t.rows.size();
    } else if (t.rows.size() != cmp.rounds) {
      throw ExperimentError("round count mismatch: " + run_dirs[0].string() + " has " + std::to_string(cmp.rounds) +
                            ", " + run_dirs[i].string() + " has " + std::to_string(t.rows.size()));
    }
    std::string label = t.rows.empty() ? run_dirs[i].filename().string() : t.rows[0][t.column("method")];
    const std::string base = label;
    for (int n = 2; std::find(cmp.labels.begin(), cmp.labels.end(), label) != cmp.labels.end(); ++n) {
      label = base + "_" + std::to_string(n);
    }
    cmp.labels.push_back(label);
    cmp.map50.push_back(t.numbers("map50"));
    cmp.cumulative.push_back(t.numbers("bytes_saved_cumulative"));
  }
  return cmp;
}

/// One row per round: map50 per run, map50 deltas against the first run, then
/// cumulative bytes saved per run.
inline void write_comparison(const Comparison& cmp, std::ostream& os) {
  std::vector<std::string> header{"round"};
  for (const auto& l : cmp.labels) header.push_back("map50_" + l);
  for (std::size_t i = 1; i < cmp.labels.size(); ++i) header.push_back("delta_map50_" + cmp.labels[i] + "_vs_" + cmp.labels[0]);
  for (const auto& l : cmp.labels) header.push_back("bytes_saved_cumulative_" + l);
  os << detail::csv_line(header);
  std::vector<std::vector<double>> deltas;
  for (std::size_t i = 1; i < cmp.labels.size(); ++i) deltas.push_back(cmp.delta(i));
  for (std::size_t r = 0; r < cmp.rounds; ++r) {
    std::vector<std::string> row{std::to_string(r + 1)};
    for (const auto& m : cmp.map50) row.push_back(detail::format_double(m[r]));
    for (const auto& d : deltas) row.push_back(detail::format_double(d[r]));
    for (const auto& c : cmp.cumulative) row.push_back(detail::format_double(c[r]));
    os << detail::csv_line(row);
  }
}

}  // namespace fedsparse
