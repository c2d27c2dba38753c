#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dflsim/data.hpp"
#include "dflsim/protocol.hpp"
#include "support.hpp"

using namespace dflsim;

namespace {

GradientOracle constant_gradient(double g) {
  return [g](std::span<const double> params, const Batch&) {
    LossGrad lg;
    lg.loss = 0.5;
    lg.grad.assign(params.size(), g);
    return lg;
  };
}

std::shared_ptr<const Dataset> tiny_data(std::size_t n = 8) {
  return std::make_shared<const Dataset>(generate_linesteer(n, 8, 8, 1));
}

SiloState make_state(SiloId id, std::vector<double> params, std::shared_ptr<const Dataset> data = tiny_data()) {
  SiloState s;
  s.id = id;
  s.params = std::move(params);
  s.data = data;
  s.sampler = BatchSampler(iota_indices(data->size()), 1);
  return s;
}

struct Toy {
  FADNetConfig net;
  std::unique_ptr<Model> model;
  std::shared_ptr<const Dataset> train;
  Dataset test;

  Toy(ModelKind kind = ModelKind::fadnet, std::size_t samples = 240) {
    net.height = 16;
    net.width = 16;
    net.widths = {4, 6, 8};
    net.feature_dim = 8;
    model = std::make_unique<Model>(kind, net);
    auto split = train_test_split(generate_linesteer(samples, 16, 16, 3), 0.8, 4);
    train = std::make_shared<const Dataset>(std::move(split.train));
    test = std::move(split.test);
  }

  TrainingSetup setup(std::size_t silos, double skew = 0.5) const {
    TrainingSetup s;
    s.model = model.get();
    s.train = train;
    s.test = &test;
    if (silos == 1) {
      s.shards = {iota_indices(train->size())};
    } else {
      s.shards = partition_noniid(*train, silos, skew, 5).shards();
    }
    return s;
  }
};

TrainConfig quick_config(std::size_t rounds = 4) {
  TrainConfig c;
  c.rounds = rounds;
  c.eval_interval = 2;
  c.batch_size = 8;
  c.learning_rate = 0.003;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("schedule: exactly one consensus step per window of s+1") {
  CHECK(is_consensus_step(0, 1));
  CHECK_FALSE(is_consensus_step(1, 1));
  CHECK(is_consensus_step(2, 1));
  for (int s = 1; s <= 6; ++s) {
    for (std::uint64_t start = 0; start < 40; ++start) {
      int hits = 0;
      for (std::uint64_t k = start; k < start + static_cast<std::uint64_t>(s) + 1; ++k) hits += is_consensus_step(k, s);
      CHECK(hits == 1);
    }
  }
}

TEST_CASE("consensus branch averages a two-silo ring") {
  const ConsensusMatrix a(2, {0.5, 0.5, 0.5, 0.5});
  TrainConfig cfg;
  auto s0 = make_state(0, {1.0});
  auto s1 = make_state(1, {3.0});
  const auto n0 = dpasgd_update(s0, {{1, s1.params}}, a, cfg, constant_gradient(0.0));
  const auto n1 = dpasgd_update(s1, {{0, s0.params}}, a, cfg, constant_gradient(0.0));
  CHECK(n0.params == std::vector<double>{2.0});
  CHECK(n1.params == std::vector<double>{2.0});
  CHECK(n0.k == 1);
}

TEST_CASE("missing in-neighbor message aborts the consensus step") {
  const ConsensusMatrix a(2, {0.5, 0.5, 0.5, 0.5});
  CHECK_THROWS_AS(dpasgd_update(make_state(0, {1.0}), {}, a, TrainConfig{}, constant_gradient(0.0)), TrainingAbort);
}

TEST_CASE("sgd gradient step subtracts alpha times the gradient") {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.learning_rate = 0.1;
  auto s = make_state(0, {1.0, -2.0});
  s.k = 1;
  const auto next = dpasgd_update(s, {}, ConsensusMatrix::identity(1), cfg, constant_gradient(1.0));
  CHECK(next.params[0] == 1.0 - 0.1);
  CHECK(next.params[1] == -2.0 - 0.1);
  CHECK(next.k == 2);
}

TEST_CASE("first adam step moves each coordinate by about alpha") {
  TrainConfig cfg;
  auto s = make_state(0, {0.0, 0.0});
  s.k = 1;
  const auto next = dpasgd_update(s, {}, ConsensusMatrix::identity(1), cfg, constant_gradient(4.0));
  CHECK(next.params[0] == doctest::Approx(-0.001).epsilon(1e-6));
  CHECK(next.adam.t == 1);
}

TEST_CASE("non-finite gradients abort with diagnostics") {
  TrainConfig cfg;
  auto s = make_state(3, {1.0});
  s.k = 1;
  try {
    dpasgd_update(s, {}, ConsensusMatrix::identity(1), cfg, constant_gradient(std::nan("")));
    FAIL("expected abort");
  } catch (const TrainingAbort& e) {
    CHECK(std::string(e.what()).find("silo 3") != std::string::npos);
  }
}

TEST_CASE("federated average cases") {
  const std::vector<std::vector<double>> two{{2.0}, {4.0}};
  CHECK(federated_average(two, std::vector<int>{1, 1}) == std::vector<double>{3.0});
  CHECK(federated_average(two, std::vector<int>{1, 0}) == two[0]);
  CHECK(federated_average(two, std::vector<int>{0, 1}) == two[1]);
  const std::vector<std::vector<double>> same(5, std::vector<double>{0.1, -7.25, 1e-3});
  CHECK(federated_average(same, {}) == same[0]);
  CHECK_THROWS_AS(federated_average(two, std::vector<int>{0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(federated_average(two, std::vector<int>{1}), std::invalid_argument);
  const std::vector<std::vector<double>> ragged{{1.0}, {1.0, 2.0}};
  CHECK_THROWS_AS(federated_average(ragged, {}), std::invalid_argument);
}

TEST_CASE("batch sampler walks shuffled epochs") {
  BatchSampler s({3, 5, 7, 9}, 2);
  std::vector<std::size_t> seen;
  for (int k = 0; k < 2; ++k) {
    const auto b = s.next(2);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<std::size_t>{3, 5, 7, 9});
  CHECK(s.next(9).size() == 9);
  CHECK_THROWS(BatchSampler({}, 1));
}

TEST_CASE("evaluate: zero parameters score about 1/sqrt(3), repeated calls agree") {
  const Toy toy(ModelKind::fadnet, 2000);
  const std::vector<double> zero(toy.model->param_count(), 0.0);
  const double r = evaluate(*toy.model, zero, toy.test);
  CHECK(r == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(0.08));
  const auto p = toy.model->init(1);
  CHECK(evaluate(*toy.model, p, toy.test) == evaluate(*toy.model, p, toy.test));
  CHECK_THROWS(evaluate(*toy.model, std::vector<double>(3), toy.test));
}

TEST_CASE("a memorized single sample evaluates to zero") {
  const Toy toy(ModelKind::backbone_only);
  ModelParams p(toy.model->layout());
  const std::vector<std::size_t> one{0};
  const Dataset single = toy.test.subset(one);
  p.tensor(p.index_of("head.fc.bias"))[0] = single.targets[0];
  CHECK(evaluate(*toy.model, p.flatten(), single) == 0.0);
}

TEST_CASE("metrics log invariants and csv round trip") {
  MetricsLog log;
  log.append({0, 0.0, 0.25, 0.5, "dfl"});
  log.append({10, 1.5, 0.1, 1.0 / 3.0, "dfl"});
  CHECK_THROWS(log.append({10, 2.0, 0.1, 0.1, "dfl"}));
  CHECK_THROWS(log.append({11, 1.0, 0.1, 0.1, "dfl"}));
  const auto csv = log.to_csv();
  CHECK(csv.rfind("round,sim_time_s,train_loss,test_rmse,strategy\n", 0) == 0);
  const auto back = MetricsLog::from_csv(csv);
  REQUIRE(back.rows().size() == 2);
  CHECK(back.rows()[1].test_rmse == 1.0 / 3.0);
  CHECK(back.to_csv() == csv);
  CHECK_THROWS(MetricsLog::from_csv("bad header\n"));
}

TEST_CASE("alpha zero with identical init keeps every silo fixed") {
  const Toy toy;
  const auto setup = toy.setup(5);
  auto cfg = quick_config(3);
  cfg.learning_rate = 0.0;
  const auto g = testsupport::random_instance(5, 3);
  const auto r = build_overlay_christofides(g, delay_params_for(*toy.model, cfg));
  const auto out = run_dfl(r.overlay, consensus_matrix(r.overlay), setup, cfg);
  const auto init = toy.model->init(cfg.seed);
  // Weights sum to one only up to rounding, so allow a few ulps.
  for (const auto& s : out.silos) {
    REQUIRE(s.params.size() == init.size());
    double worst = 0.0;
    for (std::size_t c = 0; c < init.size(); ++c)
      worst = std::max(worst, std::abs(s.params[c] - init[c]) / std::max(std::abs(init[c]), 1e-300));
    CHECK(worst <= 1e-14);
  }
}

TEST_CASE("one round with s=1 advances every k by two") {
  const Toy toy;
  auto cfg = quick_config(1);
  for (int s : {1, 3}) {
    cfg.local_steps = s;
    const auto g = testsupport::random_instance(4, 8);
    const auto r = build_overlay_christofides(g, delay_params_for(*toy.model, cfg));
    const auto out = run_dfl(r.overlay, consensus_matrix(r.overlay), toy.setup(4), cfg);
    for (const auto& st : out.silos) CHECK(st.k == static_cast<std::uint64_t>(s + 1));
  }
}

TEST_CASE("dfl metrics rows follow the eval cadence and the cycle time") {
  const Toy toy;
  const auto cfg = quick_config(5);
  const auto g = testsupport::random_instance(4, 1);
  const auto r = build_overlay_christofides(g, delay_params_for(*toy.model, cfg));
  const auto out = run_dfl(r.overlay, consensus_matrix(r.overlay), toy.setup(4), cfg);
  std::vector<std::size_t> rounds;
  for (const auto& row : out.log.rows()) rounds.push_back(row.round);
  CHECK(rounds == std::vector<std::size_t>{0, 2, 4, 5});
  const double ct = cycle_time(r.overlay, delay_params_for(*toy.model, cfg));
  CHECK(out.log.back().sim_time_s == 5 * ct);
  CHECK(out.log.rows()[0].sim_time_s == 0.0);
  for (const auto& row : out.log.rows()) CHECK(row.strategy == "dfl");
}

TEST_CASE("dfl on one silo reproduces cll exactly") {
  const Toy toy;
  const auto cfg = quick_config(4);
  const auto g = std::make_shared<const ConnectivityGraph>(std::vector<Silo>{{0, 0.03}, {1, 0.0}},
                                                           std::vector<Link>{{0, 1, 0.1, 1e6}}, true);
  TrainingSetup setup = toy.setup(1);
  const auto dfl = train_decentralized(setup, ConsensusMatrix::identity(1), {{}}, 1.0, cfg);
  const auto cll = run_cll(0.03, setup, cfg);
  REQUIRE(dfl.log.rows().size() == cll.log.rows().size());
  for (std::size_t k = 0; k < dfl.log.rows().size(); ++k) {
    CHECK(dfl.log.rows()[k].test_rmse == cll.log.rows()[k].test_rmse);
    CHECK(dfl.log.rows()[k].train_loss == cll.log.rows()[k].train_loss);
  }
  CHECK(dfl.final_params == cll.final_params);
}

TEST_CASE("sfl on one silo reproduces cll exactly") {
  const Toy toy;
  const auto cfg = quick_config(4);
  const auto setup = toy.setup(1);
  const StarTopology star{{0.03}, {0.1}, {1e6}, 0.0};
  const auto sfl = run_sfl(star, setup, cfg);
  const auto cll = run_cll(0.03, setup, cfg);
  CHECK(sfl.final_params == cll.final_params);
  CHECK(sfl.log.back().test_rmse == cll.log.back().test_rmse);
}

TEST_CASE("sfl with identical shards keeps silos equal every round") {
  const Toy toy;
  auto cfg = quick_config(3);
  TrainingSetup setup = toy.setup(1);
  setup.shards = {setup.shards[0], setup.shards[0], setup.shards[0]};
  const StarTopology star{{0.01, 0.01, 0.01}, {0.1, 0.1, 0.1}, {1e6, 1e6, 1e6}, 0.0};
  const auto out = run_sfl(star, setup, cfg);
  for (const auto& s : out.silos) CHECK(s.params == out.silos[0].params);
}

TEST_CASE("cll with zero rounds logs only the initial model") {
  const Toy toy;
  const auto out = run_cll(0.03, toy.setup(1), quick_config(0));
  REQUIRE(out.log.rows().size() == 1);
  CHECK(out.log.rows()[0].round == 0);
  CHECK(out.log.rows()[0].test_rmse == evaluate(*toy.model, toy.model->init(9), toy.test));
}

TEST_CASE("cll overfits a 32-sample subset") {
  Toy toy(ModelKind::fadnet, 40);
  TrainingSetup s = toy.setup(1);
  s.shards[0].resize(32);
  auto cfg = quick_config(2000);
  cfg.batch_size = 32;
  cfg.learning_rate = 0.003;
  cfg.eval_interval = 2000;
  const auto out = run_cll(0.01, s, cfg);
  const auto batch = toy.train->batch(s.shards[0]);
  CHECK(toy.model->loss(out.final_params, batch) < 1e-3);
}

TEST_CASE("training is deterministic across thread counts") {
  const Toy toy;
  auto cfg = quick_config(4);
  const auto g = testsupport::random_instance(6, 2);
  const auto r = build_overlay_christofides(g, delay_params_for(*toy.model, cfg));
  const auto a = consensus_matrix(r.overlay);
  const auto one = run_dfl(r.overlay, a, toy.setup(6), cfg).log.to_csv();
  cfg.threads = 3;
  CHECK(run_dfl(r.overlay, a, toy.setup(6), cfg).log.to_csv() == one);
  cfg.threads = 8;
  CHECK(run_dfl(r.overlay, a, toy.setup(6), cfg).log.to_csv() == one);
}

TEST_CASE("eval mask selects the averaged silos") {
  const Toy toy;
  auto cfg = quick_config(2);
  cfg.eval_mask = {1, 0, 0, 0};
  const auto g = testsupport::random_instance(4, 6);
  const auto r = build_overlay_christofides(g, delay_params_for(*toy.model, cfg));
  const auto out = run_dfl(r.overlay, consensus_matrix(r.overlay), toy.setup(4), cfg);
  CHECK(out.final_params == out.silos[0].params);
  cfg.eval_mask = {0, 0, 0, 0};
  CHECK_THROWS(run_dfl(r.overlay, consensus_matrix(r.overlay), toy.setup(4), cfg));
}

TEST_CASE("config and setup validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS(c.validate(2));
  c = TrainConfig{};
  c.local_steps = 0;
  CHECK_THROWS(c.validate(2));
  CHECK(parse_strategy("sfl") == Strategy::sfl);
  CHECK_THROWS(parse_strategy("xfl"));
  CHECK(parse_optimizer("sgd") == OptimizerKind::sgd);
  const Toy toy;
  TrainingSetup s = toy.setup(2);
  s.shards[1].clear();
  CHECK_THROWS(train_server(s, 1.0, quick_config(1)));
}
