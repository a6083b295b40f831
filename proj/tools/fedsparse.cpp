// fedsparse command-line driver.
//
//   fedsparse run --config <path> [--method m] [--seed n] [--rounds n] [--out dir] [--<key> value ...]
//   fedsparse compare <dir> <dir>... [--out file]
//   fedsparse gen-data --spec <path> --out <dir>
//   fedsparse eval --model <path> --data <dir> [--config <path>]
//
// Exit status: 0 success, 2 configuration or usage error, 3 runtime failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "fedsparse/fedsparse.hpp"

namespace fs = std::filesystem;
using namespace fedsparse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Autodiff buffers are large and short-lived; keep them out of mmap/munmap churn.
void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

ExperimentConfig load_or_default(const std::string& path, ConfigSource& src) {
  if (path.empty()) return ExperimentConfig{};
  return load_config(path, &src);
}

int cmd_run(const std::string& config_path, const std::map<std::string, std::string>& overrides) {
  ConfigSource src;
  ExperimentConfig cfg = load_or_default(config_path, src);
  for (const auto& key : config_keys()) {
    if (auto it = overrides.find(key); it != overrides.end() && !it->second.empty()) {
      apply_override(cfg, src, key, it->second);
    }
  }
  validate(cfg, src);
  const ExperimentResult res = run_experiment(cfg, RunOptions{&std::cerr, {}});
  std::printf("%s: final map50 %.2f, bytes saved %lld, written to %s\n", method_name(cfg.method).c_str(),
              res.reports.back().map50, static_cast<long long>(res.reports.back().bytes_saved_cumulative),
              res.out_dir.string().c_str());
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const Comparison cmp = compare_runs(paths);
  write_comparison(cmp, std::cout);
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw ExperimentError("cannot write " + out);
    write_comparison(cmp, os);
  }
  return kExitOk;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
  ConfigSource src;
  const ExperimentConfig cfg = load_config(spec_path, &src);
  validate(cfg, src);
  write_dataset(cfg, out);
  std::printf("wrote %zu train and %zu test images to %s\n", cfg.train_images, cfg.test_images, out.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, const std::string& config_path) {
  ConfigSource src;
  fs::path cfg_path = config_path;
  if (cfg_path.empty() && fs::exists(fs::path(model_path).parent_path() / "config.txt")) {
    cfg_path = fs::path(model_path).parent_path() / "config.txt";
  }
  const ExperimentConfig cfg = load_or_default(cfg_path.string(), src);
  validate(cfg, src);
  const ModelParams model = load_checkpoint(model_path, cfg.detector);
  const auto test = make_examples(read_split(data_dir, "test"), cfg.detector);
  const ModelEvaluation ev = evaluate_model(model, test, cfg.loss, cfg.eval);
  std::printf("images %zu\nmap50 %.4f\neval_loss %.6f\n", test.size(), ev.map50, ev.eval_loss);
  for (const auto& c : ev.detail.per_class) {
    std::printf("class %zu ap50 %.4f (%zu objects)\n", c.class_id, c.ap, c.ground_truths);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Sparse federated training of a grid object detector"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run one federated experiment");
  std::string config_path;
  std::map<std::string, std::string> overrides;
  run->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  for (const auto& key : config_keys()) {
    run->add_option("--" + key, overrides[key], "Override config key '" + key + "'");
  }

  auto* compare = app.add_subcommand("compare", "Per-round comparison of finished runs");
  std::vector<std::string> run_dirs;
  std::string compare_out;
  compare->add_option("dirs", run_dirs, "Run directories")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Also write the table to this CSV file");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic train/test splits to disk");
  std::string spec_path, data_out;
  gen->add_option("--spec", spec_path, "Config file with dataset keys")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", data_out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  std::string model_path, data_dir, eval_config;
  eval->add_option("--model", model_path, "FWM1 checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Directory written by gen-data")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--config", eval_config, "Config used for training (default: config.txt beside the model)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, overrides);
    if (*compare) return cmd_compare(run_dirs, compare_out);
    if (*gen) return cmd_gen_data(spec_path, data_out);
    if (*eval) return cmd_eval(model_path, data_dir, eval_config);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
