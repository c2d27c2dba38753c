#include "dflsim/experiment.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dflsim/checkpoint.hpp"
#include "dflsim/data.hpp"
#include "dflsim/topology.hpp"

namespace dflsim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "topology",       "strategy",          "model",           "height",
      "width",          "channels",          "widths",          "feature_dim",
      "rounds",         "local_steps",       "batch_size",      "learning_rate",
      "optimizer",      "eval_interval",     "threads",         "eval_mask",
      "data_source",    "samples",           "skew",            "train_fraction",
      "external_path",  "server_latency_s",  "server_bandwidth_Bps", "server_compute_time_s",
      "cll_compute_time_s", "output_dir",    "seed"};
  return keys;
}

template <typename T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key, fmt::format("wrong type ({})", j.at(key).dump()));
  }
}

std::size_t count_field(const json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(key, fmt::format("expected a nonnegative integer, got {}", v.dump()));
  }
  return v.get<std::size_t>();
}

double number_field(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(key, fmt::format("expected a number, got {}", v.dump()));
  return v.get<double>();
}

template <typename Enum, typename Parse>
Enum enum_field(const json& j, const char* key, Enum fallback, Parse parse) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(key, fmt::format("expected a string, got {}", v.dump()));
  try {
    return parse(v.get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute()) return p;
  return fs::absolute(base / p).lexically_normal();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().contains(key)) throw ConfigError(key, "unknown key");
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  c.topology = field<std::string>(j, "topology", c.topology.string());
  c.strategy = enum_field(j, "strategy", c.strategy, parse_strategy);
  c.model = enum_field(j, "model", c.model, parse_model_kind);

  c.net.height = count_field(j, "height", c.net.height);
  c.net.width = count_field(j, "width", c.net.width);
  c.net.channels = count_field(j, "channels", c.net.channels);
  if (j.contains("widths")) {
    const auto w = field<std::vector<std::size_t>>(j, "widths", {});
    if (w.size() != 3) throw ConfigError("widths", "expected exactly 3 block widths");
    std::copy(w.begin(), w.end(), c.net.widths.begin());
  }
  c.net.feature_dim = count_field(j, "feature_dim", c.net.feature_dim);

  auto& t = c.train;
  t.strategy = c.strategy;
  t.rounds = count_field(j, "rounds", t.rounds);
  t.local_steps = static_cast<int>(count_field(j, "local_steps", static_cast<std::size_t>(t.local_steps)));
  t.batch_size = count_field(j, "batch_size", t.batch_size);
  t.learning_rate = number_field(j, "learning_rate", t.learning_rate);
  t.optimizer = enum_field(j, "optimizer", t.optimizer, parse_optimizer);
  t.eval_interval = count_field(j, "eval_interval", t.eval_interval);
  t.threads = count_field(j, "threads", t.threads);
  t.eval_mask = field<std::vector<int>>(j, "eval_mask", {});
  t.seed = field<std::uint64_t>(j, "seed", t.seed);

  c.data_source = enum_field(j, "data_source", c.data_source, [](const std::string& s) {
    if (s == "linesteer") return DataSource::linesteer;
    if (s == "external") return DataSource::external;
    throw std::invalid_argument(fmt::format("unknown data source '{}'", s));
  });
  c.samples = count_field(j, "samples", c.samples);
  c.skew = number_field(j, "skew", c.skew);
  c.train_fraction = number_field(j, "train_fraction", c.train_fraction);
  c.external_path = field<std::string>(j, "external_path", "");

  c.server_latency_s = number_field(j, "server_latency_s", c.server_latency_s);
  c.server_bandwidth_Bps = number_field(j, "server_bandwidth_Bps", c.server_bandwidth_Bps);
  c.server_compute_time_s = number_field(j, "server_compute_time_s", c.server_compute_time_s);
  if (j.contains("cll_compute_time_s") && !j.at("cll_compute_time_s").is_null()) {
    c.cll_compute_time_s = number_field(j, "cll_compute_time_s", 0.0);
  }
  c.output_dir = field<std::string>(j, "output_dir", c.output_dir.string());
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", fmt::format("cannot read config {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", fmt::format("{} is not valid JSON: {}", path.string(), e.what()));
  }
  return from_json(j, fs::absolute(path).parent_path());
}

fs::path ExperimentConfig::resolved_topology() const {
  if (topology.is_absolute()) return topology;
  const auto local = resolve(topology, base_dir);
  if (fs::exists(local)) return local;
  const auto bundled = fs::path(DFLSIM_FIXTURE_DIR) / topology;
  if (fs::exists(bundled)) return bundled;
  return local;
}

fs::path ExperimentConfig::resolved_external() const { return resolve(external_path, base_dir); }
fs::path ExperimentConfig::resolved_output() const { return resolve(output_dir, base_dir); }

void ExperimentConfig::validate() const {
  if (!fs::exists(resolved_topology())) {
    throw ConfigError("topology", fmt::format("file not found: {}", resolved_topology().string()));
  }
  try {
    net.validate();
  } catch (const std::exception& e) {
    throw ConfigError("model", e.what());
  }
  if (train.local_steps < 1) throw ConfigError("local_steps", "must be >= 1");
  if (train.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(train.learning_rate >= 0.0) || !std::isfinite(train.learning_rate)) {
    throw ConfigError("learning_rate", "must be finite and >= 0");
  }
  if (train.eval_interval < 1) throw ConfigError("eval_interval", "must be >= 1");
  if (train.threads < 1) throw ConfigError("threads", "must be >= 1");
  for (int v : train.eval_mask) {
    if (v != 0 && v != 1) throw ConfigError("eval_mask", "entries must be 0 or 1");
  }
  if (!(skew >= 0.0 && skew <= 1.0)) throw ConfigError("skew", "must lie in [0, 1]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction", "must lie in (0, 1)");
  if (data_source == DataSource::linesteer) {
    if (samples < 2) throw ConfigError("samples", "need at least 2 samples");
    if (net.channels != 1) throw ConfigError("channels", "linesteer images are single-channel");
  } else {
    if (external_path.empty()) throw ConfigError("external_path", "required for data_source 'external'");
    if (!fs::is_directory(resolved_external())) {
      throw ConfigError("external_path", fmt::format("directory not found: {}", resolved_external().string()));
    }
  }
  if (!(server_latency_s >= 0.0) || !std::isfinite(server_latency_s)) {
    throw ConfigError("server_latency_s", "must be finite and >= 0");
  }
  if (!(server_bandwidth_Bps > 0.0) || !std::isfinite(server_bandwidth_Bps)) {
    throw ConfigError("server_bandwidth_Bps", "must be finite and > 0");
  }
  if (!(server_compute_time_s >= 0.0) || !std::isfinite(server_compute_time_s)) {
    throw ConfigError("server_compute_time_s", "must be finite and >= 0");
  }
  if (cll_compute_time_s && (!(*cll_compute_time_s > 0.0) || !std::isfinite(*cll_compute_time_s))) {
    throw ConfigError("cll_compute_time_s", "must be finite and > 0");
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["topology"] = resolved_topology().string();
  j["strategy"] = to_string(strategy);
  j["model"] = to_string(model);
  j["height"] = net.height;
  j["width"] = net.width;
  j["channels"] = net.channels;
  j["widths"] = net.widths;
  j["feature_dim"] = net.feature_dim;
  j["rounds"] = train.rounds;
  j["local_steps"] = train.local_steps;
  j["batch_size"] = train.batch_size;
  j["learning_rate"] = train.learning_rate;
  j["optimizer"] = to_string(train.optimizer);
  j["eval_interval"] = train.eval_interval;
  j["threads"] = train.threads;
  j["eval_mask"] = train.eval_mask;
  j["data_source"] = data_source == DataSource::linesteer ? "linesteer" : "external";
  j["samples"] = samples;
  j["skew"] = skew;
  j["train_fraction"] = train_fraction;
  j["external_path"] = external_path.empty() ? "" : resolved_external().string();
  j["server_latency_s"] = server_latency_s;
  j["server_bandwidth_Bps"] = server_bandwidth_Bps;
  j["server_compute_time_s"] = server_compute_time_s;
  j["cll_compute_time_s"] = cll_compute_time_s ? json(*cll_compute_time_s) : json(nullptr);
  j["output_dir"] = resolved_output().string();
  j["seed"] = train.seed;
  return j;
}

json ExperimentConfig::data_signature() const {
  json j;
  j["model"] = to_string(model);
  j["net"] = config_to_json(net);
  j["data_source"] = data_source == DataSource::linesteer ? "linesteer" : "external";
  j["samples"] = samples;
  j["skew"] = skew;
  j["train_fraction"] = train_fraction;
  j["external_path"] = external_path.empty() ? "" : resolved_external().string();
  j["topology"] = resolved_topology().string();
  j["seed"] = train.seed;
  return j;
}

namespace {

// Seed streams derived from the experiment seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kSplitStream = 2;
constexpr std::uint64_t kPartitionStream = 3;

Dataset load_data(const ExperimentConfig& c) {
  Dataset ds;
  if (c.data_source == DataSource::linesteer) {
    ds = generate_linesteer(c.samples, c.net.height, c.net.width, mix_seed(c.train.seed, kDataStream));
  } else {
    ds = load_external(c.resolved_external());
    if (ds.sample_shape() != c.net.input_shape()) {
      throw ConfigError("external_path", fmt::format("sample shape {} does not match the model input {}",
                                                     shape_string(ds.sample_shape()),
                                                     shape_string(c.net.input_shape())));
    }
  }
  return ds;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& c) {
  c.validate();
  auto graph = std::make_shared<const ConnectivityGraph>(load_topology(c.resolved_topology()));
  const Model model(c.model, c.net);
  const Dataset full = load_data(c);
  auto split = train_test_split(full, c.train_fraction, mix_seed(c.train.seed, kSplitStream));
  auto train = std::make_shared<const Dataset>(std::move(split.train));

  TrainingSetup setup;
  setup.model = &model;
  setup.train = train;
  setup.test = &split.test;

  TrainConfig tc = c.train;
  tc.strategy = c.strategy;
  RunResult r;
  if (c.strategy == Strategy::cll) {
    std::vector<std::size_t> all(train->size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    setup.shards = {std::move(all)};
    tc.eval_mask.clear();
    const double tcomp = c.cll_compute_time_s.value_or(graph->silo(0).compute_time_s);
    r = run_cll(tcomp, setup, tc);
  } else {
    if (train->size() < graph->size()) {
      throw ConfigError("samples", fmt::format("{} training samples for {} silos", train->size(), graph->size()));
    }
    setup.shards = partition_noniid(*train, graph->size(), c.skew, mix_seed(c.train.seed, kPartitionStream)).shards();
    if (!tc.eval_mask.empty() && tc.eval_mask.size() != graph->size()) {
      throw ConfigError("eval_mask", fmt::format("{} entries for {} silos", tc.eval_mask.size(), graph->size()));
    }
    if (c.strategy == Strategy::dfl) {
      const auto tour = build_overlay_christofides(graph, delay_params_for(model, tc));
      const auto a = consensus_matrix(tour.overlay);
      r = run_dfl(tour.overlay, a, setup, tc);
    } else {
      const auto star = StarTopology::around(*graph, c.server_latency_s, c.server_bandwidth_Bps,
                                             c.server_compute_time_s);
      r = run_sfl(star, setup, tc);
    }
  }
  ExperimentResult out;
  out.final_rmse = r.log.back().test_rmse;
  out.sim_time_s = r.log.back().sim_time_s;
  out.param_count = model.param_count();
  out.final_params = std::move(r.final_params);
  out.log = std::move(r.log);
  return out;
}

ExperimentResult run_and_write(const ExperimentConfig& c) {
  auto result = run_experiment(c);
  const fs::path dir = c.resolved_output();
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "metrics.csv", std::ios::binary);
    f << result.log.to_csv();
  }
  save_checkpoint(dir / "final_model", Model(c.model, c.net), result.final_params);
  {
    std::ofstream f(dir / "resolved_config.json", std::ios::binary);
    f << c.to_json().dump(2) << '\n';
  }
  return result;
}

std::vector<CompareRow> compare_experiments(const std::vector<ExperimentConfig>& configs) {
  if (configs.size() < 2) throw ConfigError("<configs>", "need >= 2 configs to compare");
  const auto sig = configs.front().data_signature();
  for (std::size_t k = 1; k < configs.size(); ++k) {
    const auto other = configs[k].data_signature();
    for (const auto& [key, value] : sig.items()) {
      if (other.at(key) != value) {
        throw ConfigError(key, fmt::format("config {} differs from config 0 ({} vs {})", k, other.at(key).dump(),
                                           value.dump()));
      }
    }
  }
  std::set<fs::path> outputs;
  for (const auto& c : configs) {
    if (!outputs.insert(c.resolved_output()).second) {
      throw ConfigError("output_dir", fmt::format("{} is shared by two configs", c.resolved_output().string()));
    }
  }
  std::vector<CompareRow> rows;
  for (std::size_t k = 0; k < configs.size(); ++k) {
    const auto r = run_and_write(configs[k]);
    rows.push_back({configs[k].resolved_output().filename().string(), to_string(configs[k].strategy), r.final_rmse,
                    r.sim_time_s});
  }
  return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = "run,strategy,final_rmse,sim_time_s\n";
  for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.label, r.strategy, r.final_rmse, r.sim_time_s);
  return out;
}

std::string compare_table(const std::vector<CompareRow>& rows) {
  std::size_t w = 3;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::string out = fmt::format("{:<{}}  {:<8}  {:>12}  {:>14}\n", "run", w, "strategy", "final_rmse", "sim_time_s");
  for (const auto& r : rows) {
    out += fmt::format("{:<{}}  {:<8}  {:>12.6f}  {:>14.3f}\n", r.label, w, r.strategy, r.final_rmse, r.sim_time_s);
  }
  return out;
}

}  // namespace dflsim
