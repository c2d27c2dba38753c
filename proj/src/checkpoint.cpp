#include "dflsim/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

namespace dflsim {

namespace {

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int b = 0; b < 8; ++b) r |= ((v >> (8 * b)) & 0xffu) << (8 * (7 - b));
    return r;
  }
  return v;
}

}  // namespace

void write_f64_buffer(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
  for (double v : values) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.write(bytes, 8);
  }
  if (!out) throw FormatError(fmt::format("write failed for {}", path.string()));
}

std::vector<double> read_f64_buffer(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot read {}", path.string()));
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) {
    throw FormatError(fmt::format("{}: {} bytes is not a whole number of float64 values", path.string(), bytes.size()));
  }
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, bytes.data() + 8 * i, 8);
    values[i] = std::bit_cast<double>(to_le(bits));
  }
  return values;
}

nlohmann::json config_to_json(const FADNetConfig& c) {
  return {{"height", c.height},           {"width", c.width},
          {"channels", c.channels},       {"widths", c.widths},
          {"feature_dim", c.feature_dim}, {"branches", c.branches},
          {"stem_kernel", c.stem_kernel}, {"stem_stride", c.stem_stride},
          {"pool_kernel", c.pool_kernel}, {"pool_stride", c.pool_stride}};
}

FADNetConfig config_from_json(const nlohmann::json& j) {
  FADNetConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  if (j.contains("widths")) {
    const auto w = j.at("widths").get<std::vector<std::size_t>>();
    if (w.size() != c.widths.size()) throw FormatError("widths must list exactly 3 block widths");
    std::copy(w.begin(), w.end(), c.widths.begin());
  }
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.branches = j.value("branches", c.branches);
  c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.pool_kernel = j.value("pool_kernel", c.pool_kernel);
  c.pool_stride = j.value("pool_stride", c.pool_stride);
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& dir, const Model& model, std::span<const double> params) {
  if (params.size() != model.param_count()) {
    throw FormatError(fmt::format("checkpoint has {} values, model needs {}", params.size(), model.param_count()));
  }
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["dtype"] = kBufferDtype;
  manifest["buffer"] = "params.bin";
  manifest["model_kind"] = to_string(model.kind());
  manifest["config"] = config_to_json(model.config());
  manifest["parameter_count"] = model.param_count();
  auto& list = manifest["parameters"] = nlohmann::json::array();
  for (const auto& info : model.layout()) list.push_back({{"name", info.name}, {"shape", info.shape}});
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  write_f64_buffer(dir / "params.bin", params);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError(fmt::format("missing manifest in {}", dir.string()));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw FormatError(fmt::format("unsupported checkpoint format version {}", manifest.at("format_version").dump()));
    }
    if (manifest.at("dtype").get<std::string>() != kBufferDtype) throw FormatError("unsupported checkpoint dtype");
    Checkpoint c;
    c.kind = parse_model_kind(manifest.at("model_kind").get<std::string>());
    c.config = config_from_json(manifest.at("config"));
    const Model model(c.kind, c.config);
    const auto& list = manifest.at("parameters");
    if (list.size() != model.layout().size()) throw FormatError("parameter list does not match the model layout");
    for (std::size_t k = 0; k < list.size(); ++k) {
      if (list[k].at("name").get<std::string>() != model.layout()[k].name ||
          list[k].at("shape").get<Shape>() != model.layout()[k].shape) {
        throw FormatError(fmt::format("parameter {} does not match the model layout", k));
      }
    }
    c.params = read_f64_buffer(dir / manifest.value("buffer", std::string("params.bin")));
    if (c.params.size() != model.param_count()) {
      throw FormatError(fmt::format("buffer holds {} values, manifest needs {}", c.params.size(), model.param_count()));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad checkpoint manifest: {}", e.what()));
  }
}

}  // namespace dflsim
