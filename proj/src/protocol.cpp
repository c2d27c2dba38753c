#include "dflsim/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include <fmt/format.h>

namespace dflsim {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::dfl: return "dfl";
    case Strategy::sfl: return "sfl";
    case Strategy::cll: return "cll";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "dfl") return Strategy::dfl;
  if (name == "sfl") return Strategy::sfl;
  if (name == "cll") return Strategy::cll;
  throw std::invalid_argument(fmt::format("unknown strategy '{}'", name));
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument(fmt::format("unknown optimizer '{}'", name));
}

void TrainConfig::validate(std::size_t silos) const {
  if (local_steps < 1) throw std::invalid_argument("local_steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
  if (eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  if (!eval_mask.empty()) {
    if (eval_mask.size() != silos) {
      throw std::invalid_argument(fmt::format("eval_mask has {} entries for {} silos", eval_mask.size(), silos));
    }
    if (std::none_of(eval_mask.begin(), eval_mask.end(), [](int v) { return v == 1; })) {
      throw std::invalid_argument("eval_mask must select at least one silo");
    }
  }
}

// ---------------------------------------------------------------- sampler

BatchSampler::BatchSampler(std::vector<std::size_t> indices, std::uint64_t seed)
    : indices_(std::move(indices)), rng_(seed) {
  if (indices_.empty()) throw std::invalid_argument("batch sampler needs a nonempty shard");
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ == order_.size()) {
      order_ = indices_;
      rng_.shuffle(std::span(order_));
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

// ---------------------------------------------------------------- updates

GradientOracle model_oracle(const Model& model) {
  return [&model](std::span<const double> params, const Batch& batch) { return model.loss_and_grad(params, batch); };
}

bool is_consensus_step(std::uint64_t k, int local_steps) {
  return k % static_cast<std::uint64_t>(local_steps + 1) == 0;
}

void consensus_step(SiloState& state, const std::map<SiloId, std::vector<double>>& inbox, const ConsensusMatrix& a) {
  const auto i = static_cast<std::size_t>(state.id);
  const std::size_t dim = state.params.size();
  std::vector<double> mixed(dim, 0.0);
  // Ascending silo id, the silo itself included in its slot.
  for (std::size_t j = 0; j < a.order(); ++j) {
    const double w = a(i, j);
    if (j == i) {
      for (std::size_t c = 0; c < dim; ++c) mixed[c] += w * state.params[c];
      continue;
    }
    const auto it = inbox.find(static_cast<SiloId>(j));
    if (it == inbox.end()) {
      if (w != 0.0) {
        throw TrainingAbort(fmt::format("silo {}: missing message from in-neighbor {} at k={}", i, j, state.k));
      }
      continue;
    }
    if (it->second.size() != dim) {
      throw TrainingAbort(fmt::format("silo {}: message from {} has {} values, expected {}", i, j, it->second.size(), dim));
    }
    for (std::size_t c = 0; c < dim; ++c) mixed[c] += w * it->second[c];
  }
  state.params = std::move(mixed);
  ++state.k;
}

void gradient_step(SiloState& state, const TrainConfig& cfg, const GradientOracle& oracle) {
  if (!state.data) throw TrainingAbort(fmt::format("silo {} has no data", state.id));
  const auto indices = state.sampler.next(cfg.batch_size);
  const Batch batch = state.data->batch(indices);
  LossGrad lg = oracle(state.params, batch);
  if (lg.grad.size() != state.params.size()) {
    throw TrainingAbort(fmt::format("silo {}: gradient has {} values, expected {}", state.id, lg.grad.size(),
                                    state.params.size()));
  }
  for (std::size_t c = 0; c < lg.grad.size(); ++c) {
    if (!std::isfinite(lg.grad[c])) {
      throw TrainingAbort(fmt::format("silo {}: non-finite gradient at coordinate {} (k={}, loss={})", state.id, c,
                                      state.k, lg.loss));
    }
  }
  const double alpha = cfg.learning_rate;
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t c = 0; c < lg.grad.size(); ++c) state.params[c] -= alpha * lg.grad[c];
  } else {
    auto& ad = state.adam;
    if (ad.m.size() != state.params.size()) {
      ad.m.assign(state.params.size(), 0.0);
      ad.v.assign(state.params.size(), 0.0);
    }
    ++ad.t;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(ad.t));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(ad.t));
    for (std::size_t c = 0; c < lg.grad.size(); ++c) {
      const double g = lg.grad[c];
      ad.m[c] = kAdamBeta1 * ad.m[c] + (1.0 - kAdamBeta1) * g;
      ad.v[c] = kAdamBeta2 * ad.v[c] + (1.0 - kAdamBeta2) * g * g;
      const double mhat = ad.m[c] / bc1;
      const double vhat = ad.v[c] / bc2;
      state.params[c] -= alpha * mhat / (std::sqrt(vhat) + kAdamEpsilon);
    }
  }
  state.last_loss = lg.loss;
  ++state.k;
}

SiloState dpasgd_update(SiloState state, const std::map<SiloId, std::vector<double>>& inbox,
                        const ConsensusMatrix& a, const TrainConfig& cfg, const GradientOracle& oracle) {
  if (is_consensus_step(state.k, cfg.local_steps)) {
    consensus_step(state, inbox, a);
  } else {
    gradient_step(state, cfg, oracle);
  }
  return state;
}

std::vector<double> federated_average(std::span<const std::vector<double>> params, std::span<const int> mask) {
  if (params.empty()) throw std::invalid_argument("federated average of no models");
  if (!mask.empty() && mask.size() != params.size()) {
    throw std::invalid_argument(fmt::format("mask has {} entries for {} models", mask.size(), params.size()));
  }
  const std::size_t dim = params[0].size();
  std::vector<double> sum(dim, 0.0);
  std::size_t selected = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != dim) throw std::invalid_argument("federated average over unequal parameter lengths");
    const int lambda = mask.empty() ? 1 : mask[i];
    if (lambda != 0 && lambda != 1) throw std::invalid_argument("mask entries must be 0 or 1");
    if (lambda == 0) continue;
    ++selected;
    for (std::size_t c = 0; c < dim; ++c) sum[c] += params[i][c];
  }
  if (selected == 0) throw std::invalid_argument("federated average with an all-zero mask");
  if (selected == 1) return sum;
  // Division, not multiplication by 1/n, keeps representable means exact.
  const auto n = static_cast<double>(selected);
  for (double& v : sum) v /= n;
  return sum;
}

double evaluate(const Model& model, std::span<const double> params, const Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluation on an empty test set");
  std::vector<double> preds;
  preds.reserve(test.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalBatch); ++i) idx.push_back(i);
    const auto p = model.predict(params, test.batch(idx));
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return rmse(preds, test.targets);
}

// ---------------------------------------------------------------- metrics

void MetricsLog::append(MetricsRow row) {
  if (!rows_.empty()) {
    if (row.round <= rows_.back().round) throw std::invalid_argument("metrics rounds must strictly increase");
    if (row.sim_time_s < rows_.back().sim_time_s) throw std::invalid_argument("simulated time went backwards");
  }
  rows_.push_back(std::move(row));
}

std::string MetricsLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& r : rows_) {
    out += fmt::format("{},{},{},{},{}\n", r.round, r.sim_time_s, r.train_loss, r.test_rmse, r.strategy);
  }
  return out;
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw std::invalid_argument("metrics.csv header mismatch");
  MetricsLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw std::invalid_argument(fmt::format("metrics row has {} cells: {}", cells.size(), line));
    log.append(MetricsRow{std::stoull(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                          cells[4]});
  }
  return log;
}

// ---------------------------------------------------------------- runners

namespace {

constexpr std::uint64_t kSamplerStream = 1000;

void check_setup(const TrainingSetup& s) {
  if (!s.model || !s.train || !s.test) throw std::invalid_argument("training setup is incomplete");
  if (s.shards.empty()) throw std::invalid_argument("training setup has no shards");
  for (const auto& shard : s.shards) {
    if (shard.empty()) throw std::invalid_argument("every silo needs at least one sample");
  }
}

std::vector<SiloState> make_silos(const TrainingSetup& s, const TrainConfig& cfg) {
  const auto init = s.model->init(cfg.seed);
  std::vector<SiloState> silos;
  for (std::size_t i = 0; i < s.shards.size(); ++i) {
    SiloState st;
    st.id = static_cast<SiloId>(i);
    st.params = init;
    st.data = s.train;
    st.sampler = BatchSampler(s.shards[i], mix_seed(cfg.seed, kSamplerStream + i));
    silos.push_back(std::move(st));
  }
  return silos;
}

// s gradient steps on every silo; silos are independent, so any thread
// count yields identical states.
void local_steps(std::vector<SiloState>& silos, const TrainConfig& cfg, const GradientOracle& oracle,
                 std::vector<double>& round_loss) {
  round_loss.assign(silos.size(), 0.0);
  auto work = [&](std::size_t i) {
    double sum = 0.0;
    for (int step = 0; step < cfg.local_steps; ++step) {
      gradient_step(silos[i], cfg, oracle);
      sum += silos[i].last_loss;
    }
    round_loss[i] = sum / cfg.local_steps;
  };
  const std::size_t workers = std::min(cfg.threads, silos.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < silos.size(); ++i) work(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < silos.size(); i += workers) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double mean_in_order(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double initial_train_loss(const TrainingSetup& s, std::span<const double> params) {
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (const auto& shard : s.shards) {
    for (std::size_t start = 0; start < shard.size(); start += kEvalBatch) {
      idx.assign(shard.begin() + static_cast<std::ptrdiff_t>(start),
                 shard.begin() + static_cast<std::ptrdiff_t>(std::min(shard.size(), start + kEvalBatch)));
      total += s.model->loss(params, s.train->batch(idx)) * static_cast<double>(idx.size());
      count += idx.size();
    }
  }
  return total / static_cast<double>(count);
}

bool log_due(std::size_t round, const TrainConfig& cfg) {
  return round % cfg.eval_interval == 0 || round == cfg.rounds;
}

std::vector<std::vector<double>> params_of(const std::vector<SiloState>& silos) {
  std::vector<std::vector<double>> out;
  for (const auto& s : silos) out.push_back(s.params);
  return out;
}

}  // namespace

RunResult train_decentralized(const TrainingSetup& setup, const ConsensusMatrix& a,
                              const std::vector<std::vector<SiloId>>& in_neighbors, double round_duration,
                              const TrainConfig& cfg) {
  check_setup(setup);
  const std::size_t n = setup.shards.size();
  cfg.validate(n);
  if (a.order() != n || in_neighbors.size() != n) {
    throw std::invalid_argument(fmt::format("{} shards but consensus matrix of order {}", n, a.order()));
  }
  const auto oracle = model_oracle(*setup.model);
  const std::string tag = to_string(Strategy::dfl);
  RunResult r;
  r.silos = make_silos(setup, cfg);
  Clock clock;
  const auto init = r.silos[0].params;
  r.log.append({0, 0.0, initial_train_loss(setup, init), evaluate(*setup.model, init, *setup.test), tag});

  std::vector<double> round_loss;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    // Everyone sends theta_j(k) before anyone mixes.
    const auto snapshot = params_of(r.silos);
    for (std::size_t i = 0; i < n; ++i) {
      if (!is_consensus_step(r.silos[i].k, cfg.local_steps)) {
        throw TrainingAbort(fmt::format("silo {} out of schedule at k={}", i, r.silos[i].k));
      }
      std::map<SiloId, std::vector<double>> inbox;
      for (SiloId j : in_neighbors[i]) inbox.emplace(j, snapshot[static_cast<std::size_t>(j)]);
      consensus_step(r.silos[i], inbox, a);
    }
    local_steps(r.silos, cfg, oracle, round_loss);
    clock.advance(round_duration);
    if (log_due(round, cfg)) {
      const auto avg = federated_average(params_of(r.silos), cfg.eval_mask);
      r.log.append({round, clock.now(), mean_in_order(round_loss), evaluate(*setup.model, avg, *setup.test), tag});
    }
  }
  r.final_params = federated_average(params_of(r.silos), cfg.eval_mask);
  return r;
}

RunResult train_server(const TrainingSetup& setup, double round_duration, const TrainConfig& cfg) {
  check_setup(setup);
  const std::size_t n = setup.shards.size();
  cfg.validate(n);
  const auto oracle = model_oracle(*setup.model);
  const std::string tag = to_string(Strategy::sfl);
  RunResult r;
  r.silos = make_silos(setup, cfg);
  Clock clock;
  std::vector<double> global = r.silos[0].params;
  r.log.append({0, 0.0, initial_train_loss(setup, global), evaluate(*setup.model, global, *setup.test), tag});

  std::vector<double> round_loss;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    local_steps(r.silos, cfg, oracle, round_loss);
    global = federated_average(params_of(r.silos), {});
    for (auto& s : r.silos) s.params = global;
    clock.advance(round_duration);
    if (log_due(round, cfg)) {
      r.log.append({round, clock.now(), mean_in_order(round_loss), evaluate(*setup.model, global, *setup.test), tag});
    }
  }
  r.final_params = global;
  return r;
}

RunResult train_centralized(const TrainingSetup& setup, double round_duration, const TrainConfig& cfg) {
  check_setup(setup);
  if (setup.shards.size() != 1) throw std::invalid_argument("centralized training takes exactly one shard");
  cfg.validate(1);
  const auto oracle = model_oracle(*setup.model);
  const std::string tag = to_string(Strategy::cll);
  RunResult r;
  r.silos = make_silos(setup, cfg);
  Clock clock;
  auto& node = r.silos[0];
  r.log.append({0, 0.0, initial_train_loss(setup, node.params), evaluate(*setup.model, node.params, *setup.test), tag});

  std::vector<double> round_loss;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    local_steps(r.silos, cfg, oracle, round_loss);
    clock.advance(round_duration);
    if (log_due(round, cfg)) {
      r.log.append({round, clock.now(), round_loss[0], evaluate(*setup.model, node.params, *setup.test), tag});
    }
  }
  r.final_params = node.params;
  return r;
}

DelayParams delay_params_for(const Model& model, const TrainConfig& cfg) {
  return DelayParams{static_cast<double>(model.model_size_bytes()), cfg.local_steps};
}

RunResult run_dfl(const Overlay& overlay, const ConsensusMatrix& a, const TrainingSetup& setup,
                  const TrainConfig& cfg) {
  if (overlay.size() != setup.shards.size()) {
    throw std::invalid_argument(fmt::format("overlay has {} silos but {} shards", overlay.size(), setup.shards.size()));
  }
  const double duration = simulate_dfl_round(overlay, delay_params_for(*setup.model, cfg));
  std::vector<std::vector<SiloId>> in(overlay.size());
  for (std::size_t i = 0; i < overlay.size(); ++i) in[i] = overlay.in_neighbors(static_cast<SiloId>(i));
  return train_decentralized(setup, a, in, duration, cfg);
}

RunResult run_sfl(const StarTopology& star, const TrainingSetup& setup, const TrainConfig& cfg) {
  if (star.size() != setup.shards.size()) {
    throw std::invalid_argument(fmt::format("star has {} silos but {} shards", star.size(), setup.shards.size()));
  }
  const double duration = simulate_sfl_round(star, delay_params_for(*setup.model, cfg));
  return train_server(setup, duration, cfg);
}

RunResult run_cll(double compute_time_s, const TrainingSetup& setup, const TrainConfig& cfg) {
  const double duration = simulate_cll_round(compute_time_s, delay_params_for(*setup.model, cfg));
  return train_centralized(setup, duration, cfg);
}

}  // namespace dflsim
