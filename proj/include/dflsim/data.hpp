#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dflsim/model.hpp"
#include "dflsim/tensor.hpp"

namespace dflsim {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor inputs;                // (count, height, width, channels)
  std::vector<double> targets;  // in [-1, 1]
  std::string provenance;

  std::size_t size() const { return targets.size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  Dataset subset(std::span<const std::size_t> indices) const;
  Batch batch(std::span<const std::size_t> indices) const;
  void validate() const;
};

inline constexpr double kLineNoiseStddev = 0.05;

// Noise-free image of a unit-width anti-aliased line through the image
// center at `angle` radians (0 is horizontal, positive rotates
// counter-clockwise). Intensity is max(0, 1 - distance to the line).
Tensor render_line(std::size_t height, std::size_t width, double angle);

// Angles uniform in [-pi/4, pi/4], Gaussian pixel noise, targets angle/(pi/4).
Dataset generate_linesteer(std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed);

struct PartitionPlan {
  std::size_t silos = 0;
  double skew = 0.0;
  std::vector<std::size_t> assignment;  // silo of each sample

  std::vector<std::vector<std::size_t>> shards() const;
  std::vector<std::size_t> counts() const;
};

// skew 0: balanced random assignment; skew 1: contiguous target-sorted
// shards; in between each sample takes the sorted assignment with
// probability `skew`.
PartitionPlan partition_noniid(std::span<const double> targets, std::size_t silos, double skew, std::uint64_t seed);
PartitionPlan partition_noniid(const Dataset& ds, std::size_t silos, double skew, std::uint64_t seed);

struct Split {
  Dataset train;
  Dataset test;
};

// floor(fraction * count) samples go to train after a seeded shuffle.
Split train_test_split(const Dataset& ds, double fraction, std::uint64_t seed);
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double fraction,
                                                                           std::uint64_t seed);

// Directory with manifest.json (sample shape), labels.csv (file,angle) and
// one raw float64 buffer per sample. Out-of-range angles are clamped and
// reported through `warnings` as well as the log.
Dataset load_external(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr);
void write_external(const std::filesystem::path& dir, const Dataset& ds);

}  // namespace dflsim
