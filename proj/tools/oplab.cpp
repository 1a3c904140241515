// oplab <experiment> --config <path> [--seed S] [--out DIR] [--trials K]

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "oplab/experiments.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Continuum-transformer in-context operator learning experiments"};
  std::string experiment;
  std::string config_path;
  std::optional<std::int64_t> seed;
  std::optional<std::string> out;
  std::optional<int> trials;
  app.add_option("experiment", experiment, "gd-check | icl-curves | blup-check | train | assumption-check")->required();
  app.add_option("--config", config_path, "experiment file (TOML subset)")->required();
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--trials", trials, "override the number of trials");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : oplab::kExitConfig;
  }

  oplab::ExperimentConfig cfg;
  try {
    const auto kind = oplab::experiment_from_name(experiment);
    cfg = oplab::load_experiment_config(oplab::ConfigFile::load(config_path), kind);
    if (seed) {
      if (*seed < 0) throw oplab::ConfigError("--seed must be nonnegative");
      cfg.seed = static_cast<std::uint64_t>(*seed);
    }
    if (out) cfg.out = *out;
    if (trials) cfg.trials = *trials;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "oplab: " << e.what() << '\n';
    return oplab::kExitConfig;
  }

  try {
    const auto result = oplab::run_experiment(cfg);
    for (const auto& f : result.files) std::cout << f.string() << '\n';
    std::cout << oplab::label(cfg.experiment) << ": " << (result.status == oplab::kExitPass ? "pass" : "threshold breach")
              << '\n';
    return result.status;
  } catch (const oplab::ConfigError& e) {
    std::cerr << "oplab: " << e.what() << '\n';
    return oplab::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "oplab: " << e.what() << '\n';
    return oplab::kExitConfig;
  }
}
