#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dflsim/tensor.hpp"

namespace dflsim {

enum class LayerKind { input_norm, conv2d, maxpool2d, relu, fc, gap, residual_add };

std::string to_string(LayerKind kind);

// Hyperparameters of one layer. Fields a kind does not use stay at their
// defaults. Image inputs are (height, width, channels).
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool bias = true;

  static LayerSpec input_norm();
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0, bool bias = true);
  static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride);
  static LayerSpec relu();
  static LayerSpec fc(std::size_t in_features, std::size_t out_features, bool bias = true);
  static LayerSpec gap();
  static LayerSpec residual_add();

  void validate() const;
  // Throws ShapeError when `input` is not acceptable.
  Shape output_shape(const Shape& input) const;
  std::vector<Shape> param_shapes() const;
  std::size_t param_count() const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// floor((in + 2*pad - kernel) / stride) + 1, or 0 when the window does not fit.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

// State a forward call leaves for the matching backward call. Holds a view
// of the parameters, which must outlive it.
class LayerCache {
 public:
  LayerCache() = default;

  bool valid() const { return valid_; }
  const LayerSpec& spec() const { return spec_; }
  const Shape& output_shape() const { return output_shape_; }
  // Relu masks and max-pool argmax positions; changes in this pattern
  // between two inputs mean a kink was crossed.
  const std::vector<std::size_t>& activation_pattern() const { return pattern_; }

 private:
  friend struct LayerOps;
  bool valid_ = false;
  LayerSpec spec_;
  Tensor input_;
  Shape skip_shape_;
  Shape output_shape_;
  std::span<const Tensor> params_;
  std::vector<std::size_t> pattern_;
  double mean_ = 0.0;
  double stddev_ = 0.0;
};

struct ForwardResult {
  Tensor output;
  LayerCache cache;
};

struct BackwardResult {
  Tensor grad_input;
  std::vector<Tensor> grad_params;
  Tensor grad_skip;  // residual_add only
};

// `skip` is the second addend of residual_add and must be null otherwise.
ForwardResult forward(const LayerSpec& layer, std::span<const Tensor> params, const Tensor& input,
                      const Tensor* skip = nullptr);
BackwardResult backward(const LayerSpec& layer, const LayerCache& cache, const Tensor& grad_out);

// Deterministic scaled-normal initialization for a layer's parameters.
std::vector<Tensor> init_params(const LayerSpec& layer, std::uint64_t seed);

// Max relative error between backward and central finite differences
// (step 1e-5) over every input and parameter coordinate of a small random
// instance.
double grad_check(const LayerSpec& layer, std::uint64_t seed);
double grad_check(const LayerSpec& layer, const Shape& input_shape, std::uint64_t seed);

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kInputNormEpsilon = 1e-6;

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// turning rounding noise into a large ratio.
double relative_error(double analytic, double numeric, double floor = 1e-6);

}  // namespace dflsim
