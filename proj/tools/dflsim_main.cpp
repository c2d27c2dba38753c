#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dflsim/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitAbort = 2;

dflsim::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed,
                              const std::optional<std::string>& out) {
  auto cfg = dflsim::ExperimentConfig::load(path);
  if (seed) cfg.train.seed = *seed;
  if (out) cfg.output_dir = std::filesystem::absolute(*out);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized federated learning simulator"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out, "Output directory");
  app.add_flag("--quiet", quiet, "Only print errors");

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config, "Experiment config (JSON)")->required();

  std::vector<std::string> configs;
  auto* cmp = app.add_subcommand("compare", "Run several experiments and tabulate them");
  cmp->add_option("configs", configs, "Experiment configs (JSON)")->required();

  for (auto* sub : {run, cmp}) {
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out, "Output directory");
    sub->add_flag("--quiet", quiet, "Only print errors");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  }
  spdlog::set_level(quiet ? spdlog::level::err : spdlog::level::info);

  try {
    if (*run) {
      const auto cfg = load(config, seed, out);
      const auto r = dflsim::run_and_write(cfg);
      if (!quiet) {
        fmt::print("{} {} rounds={} final_rmse={:.6f} sim_time_s={:.3f} out={}\n", dflsim::to_string(cfg.strategy),
                   dflsim::to_string(cfg.model), cfg.train.rounds, r.final_rmse, r.sim_time_s,
                   cfg.resolved_output().string());
      }
      return kExitOk;
    }
    if (configs.size() < 2) {
      fmt::print(stderr, "error: compare: need >= 2 configs\n");
      return kExitInvalid;
    }
    std::vector<dflsim::ExperimentConfig> cfgs;
    for (std::size_t k = 0; k < configs.size(); ++k) {
      auto c = load(configs[k], seed, std::nullopt);
      // With --out every run lands in its own subdirectory.
      if (out) c.output_dir = std::filesystem::absolute(*out) / fmt::format("run{}_{}", k, dflsim::to_string(c.strategy));
      cfgs.push_back(std::move(c));
    }
    const auto rows = dflsim::compare_experiments(cfgs);
    const auto csv = dflsim::compare_csv(rows);
    const std::filesystem::path dest = out ? std::filesystem::path(*out) : cfgs.front().resolved_output().parent_path();
    std::filesystem::create_directories(dest);
    std::ofstream(dest / "compare.csv", std::ios::binary) << csv;
    if (!quiet) fmt::print("{}", dflsim::compare_table(rows));
    return kExitOk;
  } catch (const dflsim::ConfigError& e) {
    fmt::print(stderr, "error: invalid config: {}\n", e.what());
    return kExitInvalid;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: run aborted: {}\n", e.what());
    return kExitAbort;
  }
}
