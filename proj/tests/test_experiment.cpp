#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_support.hpp"

using namespace fedsparse;
using namespace fedsparse::testing;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig =
    "# small enough for a unit test\n"
    "method = s-fedweg\n"
    "rounds = 2\n"
    "local_epochs = 1\n"
    "batch_size = 4\n"
    "image_size = 16\n"
    "grid_size = 2\n"
    "channel_widths = 4,6,8\n"
    "max_objects = 2\n"
    "train_images = 12\n"
    "test_images = 6\n"
    "histogram_bins = 5\n";

DetectorConfig small_test_detector() {
  DetectorConfig cfg;
  cfg.input_height = cfg.input_width = 16;
  cfg.channel_widths = {4, 6, 8};
  cfg.grid_size = 2;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fedsparse_experiment_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig cfg = parse_config_text(kTinyConfig);
  cfg.out = out.string();
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Drops the trailing timestamp column of every data row.
std::string without_timestamps(const std::string& csv) {
  std::stringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + FEDSPARSE_CLI_PATH + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Config, DefaultsAreValid) {
  const ExperimentConfig cfg;
  EXPECT_NO_THROW(validate(cfg));
  EXPECT_EQ(cfg.client_count(), 3u);
}

TEST(Config, ParsesKeysAndComments) {
  const ExperimentConfig cfg = parse_config_text("method = fedavg  # dense\n\nsparsity = 0.1, 0.5\nseed=9\n");
  EXPECT_EQ(cfg.method, Method::FedAvg);
  EXPECT_EQ(cfg.sparsity, (std::vector<double>{0.1, 0.5}));
  EXPECT_EQ(cfg.seed, 9u);
}

TEST(Config, ErrorsCarryLineNumbers) {
  auto message = [](const std::string& text) {
    try {
      parse_config_text(text);
    } catch (const ConfigError& e) {
      return std::make_pair(e.line(), std::string(e.what()));
    }
    return std::make_pair(std::size_t{0}, std::string());
  };
  auto [l1, m1] = message("rounds = 3\nbogus = 1\n");
  EXPECT_EQ(l1, 2u);
  EXPECT_NE(m1.find("config:2:"), std::string::npos) << m1;
  EXPECT_NE(m1.find("bogus"), std::string::npos) << m1;
  auto [l2, m2] = message("seed = 1\n# c\nseed = 2\n");
  EXPECT_EQ(l2, 3u);
  EXPECT_NE(m2.find("duplicate"), std::string::npos) << m2;
  EXPECT_EQ(message("rounds\n").first, 1u);
  EXPECT_EQ(message("rounds = three\n").first, 1u);
  EXPECT_EQ(message("parallel = maybe\n").first, 1u);
}

TEST(Config, ValidationNamesTheOffendingLine) {
  ConfigSource src;
  const ExperimentConfig cfg = parse_config_text("seed = 1\nsparsity = 0.2, 1.5\n", &src);
  try {
    validate(cfg, src);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("sparsity"), std::string::npos);
  }
}

TEST(Config, OverridesAreReportedByFlag) {
  ConfigSource src;
  ExperimentConfig cfg = parse_config_text("rounds = 4\n", &src);
  apply_override(cfg, src, "rounds", "7");
  EXPECT_EQ(cfg.rounds, 7u);
  apply_override(cfg, src, "learning_rate", "-1");
  try {
    validate(cfg, src);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("--learning_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(apply_override(cfg, src, "nope", "1"), ConfigError);
}

TEST(Config, RejectsPruningEveryChannel) {
  ExperimentConfig cfg;
  cfg.detector.channel_widths = {2, 1};
  cfg.detector.input_height = cfg.detector.input_width = cfg.scene.image_height = cfg.scene.image_width = 8;
  cfg.detector.grid_size = cfg.scene.grid_size = 2;
  cfg.sparsity = {0.99};
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Config, SerializeRoundTripsAndHashTracksResults) {
  ExperimentConfig cfg = parse_config_text(kTinyConfig);
  const ExperimentConfig back = parse_config_text(serialize_config(cfg));
  EXPECT_EQ(serialize_config(back), serialize_config(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
  ExperimentConfig moved = cfg;
  moved.out = "elsewhere";
  moved.parallel = !cfg.parallel;
  EXPECT_EQ(config_hash(moved), config_hash(cfg));
  ExperimentConfig changed = cfg;
  changed.lambda = 2e-4;
  EXPECT_NE(config_hash(changed), config_hash(cfg));
}

TEST(GammaHistogram, CountsEveryPrunableChannel) {
  ModelParams m = build_model(small_test_detector(), 0);
  const auto h = gamma_histogram(m, 4);
  std::size_t total = 0;
  for (std::size_t c : h.counts) total += c;
  EXPECT_EQ(total, prunable_channels(m.config).size());
  // Fresh BN gammas are all 0.5: everything lands in the top bin.
  EXPECT_EQ(h.max_abs, 0.5);
  EXPECT_EQ(h.counts.back(), total);
  EXPECT_EQ(h.bin_upper(3), 0.5);
  for (auto& b : m.blocks) std::fill(b.bn.gamma.data().begin(), b.bn.gamma.data().end(), 0.0);
  EXPECT_EQ(gamma_histogram(m, 4).counts.front(), total);
  EXPECT_EQ(small_gamma_fraction(m, 0.01), 1.0);
  EXPECT_THROW(gamma_histogram(m, 1), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsFloat32Exact) {
  const fs::path dir = scratch_dir("ckpt");
  const ModelParams m = build_model(small_test_detector(), 5);
  save_checkpoint(dir / "m.fwm", m);
  const ModelParams back = load_checkpoint(dir / "m.fwm", small_test_detector());
  const auto a = m.all_tensors(), b = back.all_tensors();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i]->size(); ++j)
      ASSERT_EQ((*b[i])[j], static_cast<double>(static_cast<float>((*a[i])[j])));
  DetectorConfig other = small_test_detector();
  other.channel_widths = {4, 6, 9};
  EXPECT_THROW(load_checkpoint(dir / "m.fwm", other), CheckpointError);
  write_text(dir / "junk.fwm", "nope");
  EXPECT_THROW(load_checkpoint(dir / "junk.fwm", small_test_detector()), CheckpointError);
}

TEST(RunExperiment, WritesOneRowPerRound) {
  const fs::path dir = scratch_dir("rows");
  ExperimentConfig cfg = tiny(dir / "run");
  cfg.rounds = 1;
  const ExperimentResult res = run_experiment(cfg);
  const MetricsTable t = read_metrics(dir / "run" / "metrics.csv");
  EXPECT_EQ(t.header, metrics_header(3));
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][t.column("round")], "1");
  EXPECT_EQ(t.rows[0][t.column("config_hash")], config_hash(cfg));
  EXPECT_EQ(t.numbers("bytes_saved_cumulative")[0], static_cast<double>(res.reports[0].bytes_saved_cumulative));
  for (const char* f : {"config.txt", "gamma_histograms.csv", "model.fwm", "summary.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const auto summary = nlohmann::json::parse(read_file(dir / "run" / "summary.json"));
  EXPECT_EQ(summary["config_hash"], config_hash(cfg));
  EXPECT_EQ(summary["per_round"].size(), 1u);
  // 5 bins per round, plus the header line.
  const std::string hist = read_file(dir / "run" / "gamma_histograms.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 6);
}

TEST(RunExperiment, SameConfigGivesIdenticalMetrics) {
  const fs::path dir = scratch_dir("repeat");
  ExperimentConfig a = tiny(dir / "a"), b = tiny(dir / "b");
  b.parallel = false;
  run_experiment(a);
  run_experiment(b);
  EXPECT_EQ(without_timestamps(read_file(dir / "a" / "metrics.csv")), without_timestamps(read_file(dir / "b" / "metrics.csv")));
  EXPECT_EQ(read_file(dir / "a" / "model.fwm"), read_file(dir / "b" / "model.fwm"));
}

TEST(RunExperiment, DenseMethodSavesNothing) {
  const fs::path dir = scratch_dir("dense");
  ExperimentConfig cfg = tiny(dir / "run");
  cfg.method = Method::FedAvg;
  const ExperimentResult res = run_experiment(cfg);
  for (const auto& r : res.reports) EXPECT_EQ(r.bytes_saved_cumulative, 0);
}

TEST(Compare, SelfComparisonHasZeroDeltas) {
  const fs::path dir = scratch_dir("compare");
  run_experiment(tiny(dir / "a"));
  const Comparison cmp = compare_runs({dir / "a", dir / "a"});
  EXPECT_EQ(cmp.labels, (std::vector<std::string>{"s-fedweg", "s-fedweg_2"}));
  for (double d : cmp.delta(1)) EXPECT_EQ(d, 0.0);
  std::ostringstream os;
  write_comparison(cmp, os);
  EXPECT_NE(os.str().find("delta_map50_s-fedweg_2_vs_s-fedweg"), std::string::npos);
}

TEST(Compare, DeltasMatchRecomputation) {
  const fs::path dir = scratch_dir("delta");
  ExperimentConfig dense = tiny(dir / "dense");
  dense.method = Method::FedAvg;
  run_experiment(dense);
  run_experiment(tiny(dir / "sparse"));
  const Comparison cmp = compare_runs({dir / "dense", dir / "sparse"});
  const auto a = read_metrics(dir / "dense" / "metrics.csv").numbers("map50");
  const auto b = read_metrics(dir / "sparse" / "metrics.csv").numbers("map50");
  const auto d = cmp.delta(1);
  for (std::size_t r = 0; r < d.size(); ++r) EXPECT_EQ(d[r], b[r] - a[r]);
}

TEST(Compare, RoundCountMismatchIsError) {
  const fs::path dir = scratch_dir("mismatch");
  ExperimentConfig one = tiny(dir / "one");
  one.rounds = 1;
  run_experiment(one);
  run_experiment(tiny(dir / "two"));
  EXPECT_THROW(compare_runs({dir / "one", dir / "two"}), ExperimentError);
  EXPECT_THROW(compare_runs({dir / "one"}), ExperimentError);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  write_text(dir / "ok.cfg", kTinyConfig);
  write_text(dir / "bad.cfg", "rounds = 2\nfoo = 1\n");
  const std::string out = (dir / "run").string();
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.cfg").string() + " --rounds 1 --out " + out), 0);
  EXPECT_EQ(read_metrics(dir / "run" / "metrics.csv").rows.size(), 1u);
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.cfg").string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.cfg").string() + " --batch_size 1"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("compare " + out + " " + (dir / "missing").string()), 3);
}

TEST(Cli, OutputRootFromEnvironment) {
  const fs::path dir = scratch_dir("env");
  write_text(dir / "ok.cfg", kTinyConfig);
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.cfg").string() + " --rounds 1 --out rel",
                    std::string("FEDSPARSE_OUTPUT_ROOT=") + dir.string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "rel" / "metrics.csv"));
}

TEST(Cli, GenDataThenEval) {
  const fs::path dir = scratch_dir("gendata");
  write_text(dir / "ok.cfg", kTinyConfig);
  ASSERT_EQ(run_cli("gen-data --spec " + (dir / "ok.cfg").string() + " --out " + (dir / "data").string()), 0);
  EXPECT_EQ(read_split(dir / "data", "train").size(), 12u);
  EXPECT_EQ(read_split(dir / "data", "test").size(), 6u);

  // A run over the files matches the in-memory run with the same seed.
  ExperimentConfig mem = tiny(dir / "mem"), files = tiny(dir / "files");
  files.data_dir = (dir / "data").string();
  mem.rounds = files.rounds = 1;
  run_experiment(mem);
  run_experiment(files);
  EXPECT_EQ(read_file(dir / "mem" / "model.fwm"), read_file(dir / "files" / "model.fwm"));

  ASSERT_EQ(run_cli("eval --model " + (dir / "mem" / "model.fwm").string() + " --data " + (dir / "data").string()), 0);
  write_text(dir / "wide.cfg", std::string(kTinyConfig) + "channel_widths = 4,6,9\n");
  write_text(dir / "other.cfg", "image_size = 16\ngrid_size = 2\nmax_objects = 2\nchannel_widths = 4,6,9\n");
  EXPECT_EQ(run_cli("eval --model " + (dir / "mem" / "model.fwm").string() + " --data " + (dir / "data").string() +
                    " --config " + (dir / "wide.cfg").string()),
            2);  // duplicate key
  EXPECT_EQ(run_cli("eval --model " + (dir / "mem" / "model.fwm").string() + " --data " + (dir / "data").string() +
                    " --config " + (dir / "other.cfg").string()),
            3);  // shape mismatch
}
