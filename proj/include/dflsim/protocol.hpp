#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dflsim/data.hpp"
#include "dflsim/model.hpp"
#include "dflsim/random.hpp"
#include "dflsim/simnet.hpp"
#include "dflsim/topology.hpp"

namespace dflsim {

class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Strategy { dfl, sfl, cll };
enum class OptimizerKind { sgd, adam };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);
std::string to_string(OptimizerKind o);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  Strategy strategy = Strategy::dfl;
  std::size_t rounds = 3000;
  int local_steps = 1;  // s
  std::size_t batch_size = 32;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  std::vector<int> eval_mask;  // lambda; empty means every silo
  std::size_t eval_interval = 10;
  std::size_t threads = 1;

  void validate(std::size_t silos) const;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

// Epoch-shuffled mini-batch draws over one shard.
class BatchSampler {
 public:
  BatchSampler() : rng_(0) {}
  BatchSampler(std::vector<std::size_t> indices, std::uint64_t seed);

  std::vector<std::size_t> next(std::size_t batch_size);
  std::size_t shard_size() const { return indices_.size(); }

 private:
  std::vector<std::size_t> indices_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct SiloState {
  SiloId id = 0;
  std::vector<double> params;
  AdamState adam;
  std::uint64_t k = 0;
  std::shared_ptr<const Dataset> data;
  BatchSampler sampler;
  double last_loss = 0.0;
};

// Mini-batch loss and gradient at the given parameters.
using GradientOracle = std::function<LossGrad(std::span<const double> params, const Batch& batch)>;

GradientOracle model_oracle(const Model& model);

// True when iteration k is a consensus step: k = 0 (mod s+1).
bool is_consensus_step(std::uint64_t k, int local_steps);

// One iteration of the decentralized schedule. Consensus steps mix the
// inbox (in-neighbor parameters at iteration k) with the silo's own;
// gradient steps apply SGD or Adam to a fresh mini-batch gradient.
SiloState dpasgd_update(SiloState state, const std::map<SiloId, std::vector<double>>& inbox,
                        const ConsensusMatrix& a, const TrainConfig& cfg, const GradientOracle& oracle);

// In-place helpers the runners share with dpasgd_update.
void consensus_step(SiloState& state, const std::map<SiloId, std::vector<double>>& inbox, const ConsensusMatrix& a);
void gradient_step(SiloState& state, const TrainConfig& cfg, const GradientOracle& oracle);

// theta = (1 / sum lambda) * sum lambda_i theta_i
std::vector<double> federated_average(std::span<const std::vector<double>> params, std::span<const int> mask);

inline constexpr std::size_t kEvalBatch = 64;

double evaluate(const Model& model, std::span<const double> params, const Dataset& test);

struct MetricsRow {
  std::size_t round = 0;
  double sim_time_s = 0.0;
  double train_loss = 0.0;
  double test_rmse = 0.0;
  std::string strategy;
};

class MetricsLog {
 public:
  void append(MetricsRow row);
  std::span<const MetricsRow> rows() const { return rows_; }
  const MetricsRow& back() const { return rows_.back(); }
  bool empty() const { return rows_.empty(); }

  static constexpr const char* kHeader = "round,sim_time_s,train_loss,test_rmse,strategy";
  std::string to_csv() const;
  static MetricsLog from_csv(const std::string& text);

 private:
  std::vector<MetricsRow> rows_;
};

struct RunResult {
  MetricsLog log;
  std::vector<double> final_params;  // federated average for DFL/SFL
  std::vector<SiloState> silos;
};

// Shared inputs of every strategy.
struct TrainingSetup {
  const Model* model = nullptr;
  std::shared_ptr<const Dataset> train;
  std::vector<std::vector<std::size_t>> shards;  // indices into *train, one per silo
  const Dataset* test = nullptr;
};

// Decentralized training on an explicit mixing matrix and round duration;
// run_dfl derives both from the overlay.
RunResult train_decentralized(const TrainingSetup& setup, const ConsensusMatrix& a,
                              const std::vector<std::vector<SiloId>>& in_neighbors, double round_duration,
                              const TrainConfig& cfg);
RunResult train_server(const TrainingSetup& setup, double round_duration, const TrainConfig& cfg);
RunResult train_centralized(const TrainingSetup& setup, double round_duration, const TrainConfig& cfg);

RunResult run_dfl(const Overlay& overlay, const ConsensusMatrix& a, const TrainingSetup& setup,
                  const TrainConfig& cfg);
RunResult run_sfl(const StarTopology& star, const TrainingSetup& setup, const TrainConfig& cfg);
// `setup.shards` must hold exactly one shard (the merged data).
RunResult run_cll(double compute_time_s, const TrainingSetup& setup, const TrainConfig& cfg);

DelayParams delay_params_for(const Model& model, const TrainConfig& cfg);

}  // namespace dflsim
