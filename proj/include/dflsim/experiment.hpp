#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dflsim/model.hpp"
#include "dflsim/protocol.hpp"

namespace dflsim {

// Invalid experiment configuration; `field()` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class DataSource { linesteer, external };

struct ExperimentConfig {
  std::filesystem::path topology = "gaia11.json";
  Strategy strategy = Strategy::dfl;
  ModelKind model = ModelKind::fadnet;
  FADNetConfig net;
  TrainConfig train;

  DataSource data_source = DataSource::linesteer;
  std::size_t samples = 5000;
  double skew = 0.8;
  double train_fraction = 0.8;
  std::filesystem::path external_path;

  double server_latency_s = 0.1;
  double server_bandwidth_Bps = 1e8;
  double server_compute_time_s = 0.0;
  std::optional<double> cll_compute_time_s;  // silo 0's T_c when unset

  std::filesystem::path output_dir = "out";

  // Relative paths in a loaded config resolve against this directory.
  std::filesystem::path base_dir = ".";

  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
  static ExperimentConfig load(const std::filesystem::path& path);
  // Fully defaulted form with absolute paths; reloading it reproduces the run.
  nlohmann::json to_json() const;

  std::filesystem::path resolved_topology() const;
  std::filesystem::path resolved_external() const;
  std::filesystem::path resolved_output() const;
  void validate() const;

  // Settings that must agree for runs to be comparable.
  nlohmann::json data_signature() const;
};

struct ExperimentResult {
  MetricsLog log;
  double final_rmse = 0.0;
  double sim_time_s = 0.0;
  std::size_t param_count = 0;
  std::vector<double> final_params;
};

// Runs the configured strategy without touching the filesystem beyond
// reading inputs.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// run_experiment plus metrics.csv, final_model/ and resolved_config.json.
ExperimentResult run_and_write(const ExperimentConfig& cfg);

struct CompareRow {
  std::string label;
  std::string strategy;
  double final_rmse = 0.0;
  double sim_time_s = 0.0;
};

// Each config runs into its own output directory; rows keep input order.
std::vector<CompareRow> compare_experiments(const std::vector<ExperimentConfig>& configs);
std::string compare_csv(const std::vector<CompareRow>& rows);
std::string compare_table(const std::vector<CompareRow>& rows);

}  // namespace dflsim
