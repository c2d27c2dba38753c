#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dflsim/layers.hpp"
#include "dflsim/tensor.hpp"

namespace dflsim {

enum class ModelKind { fadnet, backbone_only };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct FADNetConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::array<std::size_t, 3> widths{8, 16, 32};  // per residual block
  std::size_t feature_dim = 64;                 // d
  std::size_t branches = 3;                     // n, one GAP branch per block
  std::size_t stem_kernel = 5;
  std::size_t stem_stride = 2;
  std::size_t pool_kernel = 3;
  std::size_t pool_stride = 2;

  static FADNetConfig toy() { return {}; }
  // 200x200 grayscale, widths 32/64/128; the last block is 7x7x128 = 6272.
  static FADNetConfig full_scale();

  void validate() const;
  Shape input_shape() const { return {height, width, channels}; }

  friend bool operator==(const FADNetConfig&, const FADNetConfig&) = default;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size() const { return shape_size(shape); }
};

// Ordered, named parameter tensors with a flat float64 view.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(std::vector<ParamInfo> layout);

  static ModelParams unflatten(std::vector<ParamInfo> layout, std::span<const double> flat);
  std::vector<double> flatten() const;

  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::size_t total_size() const { return total_; }
  std::size_t count() const { return tensors_.size(); }
  Tensor& tensor(std::size_t k) { return tensors_[k]; }
  const Tensor& tensor(std::size_t k) const { return tensors_[k]; }
  std::size_t index_of(const std::string& name) const;
  std::span<const Tensor> slice(std::size_t first, std::size_t count) const {
    return std::span<const Tensor>(tensors_).subspan(first, count);
  }

 private:
  std::vector<ParamInfo> layout_;
  std::vector<Tensor> tensors_;
  std::size_t total_ = 0;
};

struct Batch {
  Tensor inputs;                // (batch, height, width, channels)
  std::vector<double> targets;  // normalized steering angles

  std::size_t size() const { return targets.size(); }
  Tensor item(std::size_t i) const;
};

// f_c = sum_h w_h * f_h
std::vector<double> accumulation(std::span<const std::vector<double>> features, std::span<const double> weights);
// mean(f_s * f_c)
double aggregation(std::span<const double> backbone, std::span<const double> accumulated);

double rmse(std::span<const double> predictions, std::span<const double> targets);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
  std::vector<double> predictions;
};

class Model {
 public:
  Model(ModelKind kind, FADNetConfig cfg);

  ModelKind kind() const { return kind_; }
  const FADNetConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::size_t param_count() const { return total_; }
  std::size_t model_size_bytes() const { return total_ * sizeof(double); }

  // He-normal weights, zero biases, accumulation weights 1/n.
  std::vector<double> init(std::uint64_t seed) const;

  std::vector<double> predict(std::span<const double> params, const Batch& batch) const;
  // Mean squared error over the batch and its exact gradient.
  LossGrad loss_and_grad(std::span<const double> params, const Batch& batch) const;
  // Forward-only MSE. When `pattern` is given it receives the concatenated
  // relu masks and max-pool argmaxes over the batch.
  double loss(std::span<const double> params, const Batch& batch,
              std::vector<std::size_t>* pattern = nullptr) const;

 private:
  struct Trace;
  struct Block {
    LayerSpec conv_a, relu_a, conv_b, shortcut, add, relu_out;
    std::size_t conv_a_param, conv_b_param, shortcut_param;  // index of first tensor
  };

  void check(std::span<const double> params, const Batch& batch) const;
  double forward_item(const ModelParams& p, const Tensor& image, Trace& t) const;
  void backward_item(const ModelParams& p, const Trace& t, double grad_pred, std::span<double> grad) const;

  ModelKind kind_;
  FADNetConfig cfg_;
  std::vector<ParamInfo> layout_;
  std::size_t total_ = 0;

  LayerSpec norm_, stem_, pool_, gap_, tail_, head_;
  std::vector<Block> blocks_;
  std::vector<LayerSpec> projections_;
  std::size_t stem_param_ = 0, tail_param_ = 0, head_param_ = 0, accum_param_ = 0;
  std::vector<std::size_t> projection_param_;
  std::size_t flat_features_ = 0;
};

std::vector<double> fadnet_forward(const FADNetConfig& cfg, std::span<const double> params, const Batch& batch);
std::vector<double> backbone_only_forward(const FADNetConfig& cfg, std::span<const double> params,
                                          const Batch& batch);
LossGrad loss_and_grad(ModelKind kind, const FADNetConfig& cfg, std::span<const double> params, const Batch& batch);

struct ModelGradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // coordinates whose perturbation crossed a relu/max-pool kink
};

// Central finite differences over every parameter coordinate (or every
// `stride`-th one). Coordinates whose +/- perturbation changes the
// activation pattern are skipped and counted.
ModelGradCheck model_grad_check(const Model& model, std::span<const double> params, const Batch& batch,
                                std::size_t stride = 1);

}  // namespace dflsim
