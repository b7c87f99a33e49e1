#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sdlab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"sdlab: guided diffusion sampling experiments on Gaussian-mixture ground truth"};

  std::string config_path;
  app.add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  std::string out_dir;
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides the config)");
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "seed override");
  bool trajectories = false;
  app.add_flag("--trajectories", trajectories, "record per-step trajectories");

  CLI11_PARSE(app, argc, argv);

  sdlab::CliOverrides overrides;
  if (*out_opt) overrides.output = out_dir;
  if (*seed_opt) overrides.seed = seed;
  overrides.force_trajectories = trajectories;

  try {
    const sdlab::ExperimentConfig cfg = sdlab::parse_config(config_path, overrides);
    const sdlab::ExperimentResult result = sdlab::run_experiment(cfg);
    std::cout << cfg.canonical["experiment"].get<std::string>() << " -> " << cfg.output
              << " (config " << cfg.config_hash << ")\n";
    for (const auto& assertion : result.report["assertions"]) {
      std::cout << (assertion["pass"].get<bool>() ? "  pass  " : "  FAIL  ") << assertion["name"].get<std::string>()
                << '\n';
    }
    return result.exit_status;
  } catch (const sdlab::ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
}
