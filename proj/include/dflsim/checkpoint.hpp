#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "dflsim/model.hpp"

namespace dflsim {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kBufferDtype = "float64_le";

// Raw little-endian IEEE-754 doubles, no header.
void write_f64_buffer(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64_buffer(const std::filesystem::path& path);

nlohmann::json config_to_json(const FADNetConfig& cfg);
FADNetConfig config_from_json(const nlohmann::json& j);

struct Checkpoint {
  ModelKind kind = ModelKind::fadnet;
  FADNetConfig config;
  std::vector<double> params;
};

// `dir`/manifest.json plus `dir`/params.bin.
void save_checkpoint(const std::filesystem::path& dir, const Model& model, std::span<const double> params);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dflsim
