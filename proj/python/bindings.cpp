#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dflsim/data.hpp"
#include "dflsim/experiment.hpp"
#include "dflsim/model.hpp"
#include "dflsim/protocol.hpp"
#include "dflsim/simnet.hpp"
#include "dflsim/topology.hpp"

namespace py = pybind11;
using namespace dflsim;

namespace {

py::array_t<double> to_array(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

std::vector<double> to_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

ExperimentConfig config_from(const std::string& json_text, const std::string& base_dir) {
  return ExperimentConfig::from_json(nlohmann::json::parse(json_text), base_dir);
}

py::dict result_dict(const ExperimentResult& r) {
  py::list rows;
  for (const auto& row : r.log.rows()) {
    py::dict d;
    d["round"] = row.round;
    d["sim_time_s"] = row.sim_time_s;
    d["train_loss"] = row.train_loss;
    d["test_rmse"] = row.test_rmse;
    d["strategy"] = row.strategy;
    rows.append(d);
  }
  py::dict out;
  out["metrics"] = rows;
  out["metrics_csv"] = r.log.to_csv();
  out["final_rmse"] = r.final_rmse;
  out["sim_time_s"] = r.sim_time_s;
  out["param_count"] = r.param_count;
  out["final_params"] = to_array(r.final_params);
  return out;
}

}  // namespace

PYBIND11_MODULE(_dflsim, m) {
  m.doc() = "Decentralized federated learning simulator core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TopologyError>(m, "TopologyError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<TrainingAbort>(m, "TrainingAbort", PyExc_RuntimeError);

  py::class_<ConnectivityGraph, std::shared_ptr<ConnectivityGraph>>(m, "Topology")
      .def_property_readonly("size", &ConnectivityGraph::size)
      .def("compute_times",
           [](const ConnectivityGraph& g) {
             std::vector<double> t;
             for (const auto& s : g.silos()) t.push_back(s.compute_time_s);
             return t;
           })
      .def("links",
           [](const ConnectivityGraph& g) {
             std::vector<std::tuple<int, int, double, double>> out;
             for (const auto& l : g.links()) out.emplace_back(l.src, l.dst, l.latency_s, l.bandwidth_Bps);
             return out;
           })
      .def("to_json", [](const ConnectivityGraph& g) { return topology_to_json(g); });

  m.def("load_topology",
        [](const std::filesystem::path& p) { return std::make_shared<ConnectivityGraph>(load_topology(p)); },
        py::arg("path"));

  m.def(
      "christofides",
      [](const std::shared_ptr<ConnectivityGraph>& g, double model_bytes, int local_steps) {
        const DelayParams p{model_bytes, local_steps};
        const auto r = build_overlay_christofides(g, p);
        const auto a = consensus_matrix(r.overlay);
        py::array_t<double> mat({a.order(), a.order()});
        std::copy(a.data().begin(), a.data().end(), mat.mutable_data());
        py::dict out;
        out["tour"] = std::vector<int>(r.tour.begin(), r.tour.end());
        out["weight"] = r.weight;
        out["cycle_time"] = cycle_time(r.overlay, p);
        out["dfl_round"] = simulate_dfl_round(r.overlay, p);
        out["consensus_matrix"] = mat;
        return out;
      },
      py::arg("topology"), py::arg("model_bytes"), py::arg("local_steps") = 1);

  m.def(
      "generate_linesteer",
      [](std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed) {
        const auto ds = generate_linesteer(count, height, width, seed);
        py::array_t<double> x({count, height, width, std::size_t{1}});
        std::copy(ds.inputs.data(), ds.inputs.data() + ds.inputs.size(), x.mutable_data());
        return py::make_tuple(x, to_array(ds.targets));
      },
      py::arg("count"), py::arg("height") = 32, py::arg("width") = 32, py::arg("seed") = 0);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& kind, std::size_t height, std::size_t width,
                       std::array<std::size_t, 3> widths, std::size_t feature_dim) {
             FADNetConfig cfg;
             cfg.height = height;
             cfg.width = width;
             cfg.widths = widths;
             cfg.feature_dim = feature_dim;
             return Model(parse_model_kind(kind), cfg);
           }),
           py::arg("kind") = "fadnet", py::arg("height") = 32, py::arg("width") = 32,
           py::arg("widths") = std::array<std::size_t, 3>{8, 16, 32}, py::arg("feature_dim") = 64)
      .def_property_readonly("param_count", &Model::param_count)
      .def_property_readonly("model_size_bytes", &Model::model_size_bytes)
      .def("init", [](const Model& self, std::uint64_t seed) { return to_array(self.init(seed)); }, py::arg("seed"))
      .def(
          "predict",
          [](const Model& self, const py::array_t<double, py::array::c_style | py::array::forcecast>& params,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& images) {
            if (images.ndim() != 4) throw py::value_error("images must be (batch, height, width, channels)");
            Shape shape;
            for (py::ssize_t d = 0; d < images.ndim(); ++d) shape.push_back(static_cast<std::size_t>(images.shape(d)));
            Batch b{Tensor(shape, to_vector(images)), std::vector<double>(shape[0], 0.0)};
            return to_array(self.predict(to_vector(params), b));
          },
          py::arg("params"), py::arg("images"));

  m.def(
      "federated_average",
      [](const std::vector<std::vector<double>>& params, const std::vector<int>& mask) {
        return to_array(federated_average(params, mask));
      },
      py::arg("params"), py::arg("mask") = std::vector<int>{});
  m.def(
      "accumulation",
      [](const std::vector<std::vector<double>>& features, const std::vector<double>& weights) {
        return to_array(accumulation(features, weights));
      },
      py::arg("features"), py::arg("weights"));
  m.def(
      "aggregation",
      [](const std::vector<double>& backbone, const std::vector<double>& accumulated) {
        return aggregation(backbone, accumulated);
      },
      py::arg("backbone"), py::arg("accumulated"));

  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::string& base_dir, bool write) {
        const auto cfg = config_from(config_json, base_dir);
        py::gil_scoped_release release;
        auto r = write ? run_and_write(cfg) : run_experiment(cfg);
        py::gil_scoped_acquire acquire;
        return result_dict(r);
      },
      py::arg("config_json"), py::arg("base_dir") = ".", py::arg("write") = false);

  m.def(
      "resolved_config",
      [](const std::string& config_json, const std::string& base_dir) {
        return config_from(config_json, base_dir).to_json().dump(2);
      },
      py::arg("config_json"), py::arg("base_dir") = ".");
}
