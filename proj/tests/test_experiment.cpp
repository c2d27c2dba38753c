#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "dflsim/checkpoint.hpp"
#include "dflsim/data.hpp"
#include "dflsim/experiment.hpp"
#include "support.hpp"

using namespace dflsim;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DFLSIM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Small but complete experiment for fast tests.
const char* kSmall = R"("height": 16, "width": 16, "widths": [4, 6, 8], "feature_dim": 8,
  "samples": 300, "batch_size": 8, "eval_interval": 2)";

}  // namespace

TEST_CASE("minimal config defaults to the documented values") {
  const auto c = ExperimentConfig::from_json(nlohmann::json::parse(R"({"strategy":"cll","rounds":10})"));
  CHECK(c.strategy == Strategy::cll);
  CHECK(c.train.rounds == 10);
  CHECK(c.train.batch_size == 32);
  CHECK(c.train.learning_rate == 0.001);
  CHECK(c.train.optimizer == OptimizerKind::adam);
  CHECK(c.train.local_steps == 1);
  CHECK(c.model == ModelKind::fadnet);
  CHECK(c.resolved_topology().filename() == "gaia11.json");
  CHECK(ExperimentConfig::from_json(nlohmann::json::object()).train.rounds == 3000);
}

TEST_CASE("config errors name the field") {
  auto field_of = [](const std::string& text) {
    try {
      ExperimentConfig::from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("none");
  };
  CHECK(field_of(R"({"strategy":"xfl"})") == "strategy");
  CHECK(field_of(R"({"optimizer":"rmsprop"})") == "optimizer");
  CHECK(field_of(R"({"rounds":-1})") == "rounds");
  CHECK(field_of(R"({"batch_size":0})") == "batch_size");
  CHECK(field_of(R"({"skew":2})") == "skew");
  CHECK(field_of(R"({"topology":"nowhere.json"})") == "topology");
  CHECK(field_of(R"({"colour":"blue"})") == "colour");
  CHECK(field_of(R"({"widths":[1,2]})") == "widths");
  CHECK(field_of(R"({"data_source":"external"})") == "external_path");
  CHECK(field_of(R"({"learning_rate":"fast"})") == "learning_rate");
  CHECK(field_of(R"({"channels":3})") == "channels");
}

TEST_CASE("run writes three outputs and resolved config reproduces metrics") {
  const auto dir = testsupport::scratch_dir("exp_run");
  write(dir / "cfg.json", std::string(R"({"strategy":"cll","rounds":10,"output_dir":"out",)") + kSmall + "}");
  const auto c = ExperimentConfig::load(dir / "cfg.json");
  const auto r = run_and_write(c);
  CHECK(fs::exists(dir / "out" / "metrics.csv"));
  CHECK(fs::exists(dir / "out" / "final_model" / "manifest.json"));
  CHECK(fs::exists(dir / "out" / "resolved_config.json"));
  const auto ckpt = load_checkpoint(dir / "out" / "final_model");
  CHECK(ckpt.params == r.final_params);
  const auto metrics = slurp(dir / "out" / "metrics.csv");
  CHECK(MetricsLog::from_csv(metrics).to_csv() == metrics);

  auto resolved = nlohmann::json::parse(slurp(dir / "out" / "resolved_config.json"));
  resolved["output_dir"] = (dir / "again").string();
  write(dir / "resolved.json", resolved.dump());
  run_and_write(ExperimentConfig::load(dir / "resolved.json"));
  CHECK(slurp(dir / "again" / "metrics.csv") == metrics);
}

TEST_CASE("compare needs two configs with matching data settings") {
  const auto a = ExperimentConfig::from_json(nlohmann::json::parse(R"({"strategy":"cll","rounds":2})"));
  CHECK_THROWS_AS(compare_experiments({a}), ConfigError);
  const auto b = ExperimentConfig::from_json(nlohmann::json::parse(R"({"strategy":"dfl","rounds":2,"skew":0.2})"));
  try {
    compare_experiments({a, b});
    FAIL("expected a data-settings mismatch");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "skew");
  }
}

TEST_CASE("compare tabulates every strategy; dfl time is cycle time times rounds") {
  const auto dir = testsupport::scratch_dir("exp_compare");
  std::vector<ExperimentConfig> cfgs;
  for (const char* s : {"cll", "sfl", "dfl"}) {
    const auto text = fmt::format(R"({{"strategy":"{}","rounds":4,"output_dir":"{}",{}}})", s, s, kSmall);
    cfgs.push_back(ExperimentConfig::from_json(nlohmann::json::parse(text), dir));
  }
  const auto rows = compare_experiments(cfgs);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].strategy == "cll");
  CHECK(rows[2].strategy == "dfl");
  const auto csv = compare_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(compare_table(rows).find("dfl") != std::string::npos);

  const auto g = std::make_shared<const ConnectivityGraph>(load_topology(testsupport::fixture("gaia11.json")));
  const Model m(ModelKind::fadnet, cfgs[2].net);
  const DelayParams p{8.0 * static_cast<double>(m.param_count()), 1};
  const double ct = cycle_time(build_overlay_christofides(g, p).overlay, p);
  CHECK(rows[2].sim_time_s == 4 * ct);
  CHECK(rows[0].sim_time_s == 4 * g->silo(0).compute_time_s);
}

TEST_CASE("cli exit codes and outputs") {
  const auto dir = testsupport::scratch_dir("exp_cli");
  write(dir / "ok.json", std::string(R"({"strategy":"cll","rounds":2,)") + kSmall + "}");
  write(dir / "bad.json", R"({"strategy":"xfl"})");
  write(dir / "dfl.json", std::string(R"({"strategy":"dfl","rounds":2,)") + kSmall + "}");

  CHECK(run_cli("run " + (dir / "ok.json").string() + " --out " + (dir / "o1").string(), dir / "log1") == 0);
  CHECK(fs::exists(dir / "o1" / "metrics.csv"));
  CHECK(slurp(dir / "log1").find("final_rmse=") != std::string::npos);

  CHECK(run_cli("run " + (dir / "bad.json").string(), dir / "log2") == 1);
  CHECK(slurp(dir / "log2").find("strategy") != std::string::npos);

  CHECK(run_cli("compare " + (dir / "ok.json").string(), dir / "log3") == 1);
  CHECK(slurp(dir / "log3").find("need >= 2") != std::string::npos);

  CHECK(run_cli("compare " + (dir / "ok.json").string() + " " + (dir / "dfl.json").string() + " --quiet --out " +
                    (dir / "cmp").string(),
                dir / "log4") == 0);
  CHECK(fs::exists(dir / "cmp" / "compare.csv"));
  CHECK(slurp(dir / "log4").empty());

  // --seed overrides the config.
  CHECK(run_cli("run " + (dir / "ok.json").string() + " --seed 5 --out " + (dir / "o2").string(), dir / "log5") == 0);
  CHECK(slurp(dir / "o2" / "metrics.csv") != slurp(dir / "o1" / "metrics.csv"));
  CHECK(nlohmann::json::parse(slurp(dir / "o2" / "resolved_config.json"))["seed"] == 5);
}

TEST_CASE("a diverging run exits with the runtime-abort status") {
  const auto dir = testsupport::scratch_dir("exp_abort");
  write(dir / "nan.json",
        std::string(R"({"strategy":"cll","rounds":50,"optimizer":"sgd","learning_rate":1e300,)") + kSmall + "}");
  CHECK(run_cli("run " + (dir / "nan.json").string() + " --quiet", dir / "log") == 2);
  CHECK(slurp(dir / "log").find("non-finite") != std::string::npos);
}

TEST_CASE("external data source runs end to end") {
  const auto dir = testsupport::scratch_dir("exp_external");
  write_external(dir / "data", generate_linesteer(60, 16, 16, 4));
  write(dir / "cfg.json", R"({"strategy":"sfl","rounds":2,"data_source":"external","external_path":"data",
    "height":16,"width":16,"widths":[4,6,8],"feature_dim":8,"batch_size":4,"output_dir":"out"})");
  const auto r = run_and_write(ExperimentConfig::load(dir / "cfg.json"));
  CHECK(r.log.rows().size() == 2);
  write(dir / "mismatch.json", R"({"strategy":"sfl","rounds":2,"data_source":"external","external_path":"data"})");
  CHECK_THROWS_AS(run_experiment(ExperimentConfig::load(dir / "mismatch.json")), ConfigError);
}
