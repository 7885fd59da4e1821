#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "arlab/experiment.hpp"

namespace {

enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigError = 2,
  kNumericError = 3,
  kIoError = 4,
};

int report(const std::vector<std::filesystem::path>& files, const std::string& hash) {
  for (const auto& f : files) std::cout << "wrote " << f.string() << "\n";
  std::cout << "config " << hash << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  namespace ex = arlab::experiment;

  CLI::App app{"arlab: windowed training strategies for autoregressive token models"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool force = false;
  app.add_option("-c,--config", config_path, "YAML experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the master seed");
  app.add_option("-j,--jobs", jobs, "parallel sweep points")->check(CLI::PositiveNumber);
  app.add_flag("-f,--force", force, "overwrite existing outputs");

  auto* gen_data = app.add_subcommand("gen-data", "generate the synthetic token dataset");
  auto* train = app.add_subcommand("train", "train one strategy, writing a checkpoint and a CSV log");
  std::string resume;
  train->add_option("--resume", resume, "continue from a checkpoint");
  auto* eval = app.add_subcommand("eval", "loss curves, consistency and hidden-state reports");
  std::vector<std::string> checkpoints;
  eval->add_option("--checkpoint", checkpoints, "run id and checkpoint as id=path (repeatable)");
  auto* generate = app.add_subcommand("generate", "dump generated sequences");
  std::string gen_checkpoint;
  generate->add_option("--checkpoint", gen_checkpoint, "checkpoint to sample from");
  auto* cascade = app.add_subcommand("cascade", "error-cascade simulations");
  auto* sweep = app.add_subcommand("sweep", "train and evaluate over one sweep axis");
  auto* bench = app.add_subcommand("bench", "step time and activation memory per strategy");
  for (auto* sub : {gen_data, train, eval, generate, cascade, sweep, bench}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    const ex::ExperimentConfig cfg = ex::load_config(config_path, seed);
    const std::string hash = ex::hash_of(cfg);
    if (*gen_data) return report(ex::cmd_gen_data(cfg, force), hash);
    if (*train) {
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      return report(ex::cmd_train(cfg, force, from), hash);
    }
    if (*eval) return report(ex::cmd_eval(cfg, force, checkpoints), hash);
    if (*generate) {
      std::optional<std::filesystem::path> from;
      if (!gen_checkpoint.empty()) from = gen_checkpoint;
      return report(ex::cmd_generate(cfg, force, from), hash);
    }
    if (*cascade) return report(ex::cmd_cascade(cfg, force), hash);
    if (*sweep) return report(ex::cmd_sweep(cfg, force, jobs), hash);
    if (*bench) return report(ex::cmd_bench(cfg, force), hash);
  } catch (const arlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const arlab::nn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const arlab::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUnexpected;
}
