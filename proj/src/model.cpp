#include "dflsim/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "dflsim/random.hpp"

namespace dflsim {

std::string to_string(ModelKind kind) { return kind == ModelKind::fadnet ? "fadnet" : "backbone_only"; }

ModelKind parse_model_kind(const std::string& name) {
  if (name == "fadnet") return ModelKind::fadnet;
  if (name == "backbone_only") return ModelKind::backbone_only;
  throw std::invalid_argument(fmt::format("unknown model kind '{}'", name));
}

FADNetConfig FADNetConfig::full_scale() {
  FADNetConfig c;
  c.height = 200;
  c.width = 200;
  c.channels = 1;
  c.widths = {32, 64, 128};
  c.feature_dim = 6272;
  return c;
}

void FADNetConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw ShapeError("input dimensions must be positive");
  for (auto w : widths) {
    if (w == 0) throw ShapeError("block widths must be positive");
  }
  if (feature_dim == 0) throw ShapeError("feature dimension d must be >= 1");
  if (branches != widths.size()) {
    throw ShapeError(fmt::format("branch count n={} must equal the {} residual blocks", branches, widths.size()));
  }
}

// ------------------------------------------------------------ ModelParams

ModelParams::ModelParams(std::vector<ParamInfo> layout) : layout_(std::move(layout)) {
  std::size_t offset = 0;
  for (auto& info : layout_) {
    info.offset = offset;
    offset += info.size();
    tensors_.emplace_back(info.shape);
  }
  total_ = offset;
}

ModelParams ModelParams::unflatten(std::vector<ParamInfo> layout, std::span<const double> flat) {
  ModelParams p(std::move(layout));
  if (flat.size() != p.total_) {
    throw ShapeError(fmt::format("flat parameter vector has {} values, layout needs {}", flat.size(), p.total_));
  }
  for (std::size_t k = 0; k < p.tensors_.size(); ++k) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(p.layout_[k].offset), p.layout_[k].size(),
                p.tensors_[k].data());
  }
  return p;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_);
  for (const auto& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t k = 0; k < layout_.size(); ++k) {
    if (layout_[k].name == name) return k;
  }
  throw std::out_of_range(fmt::format("no parameter named '{}'", name));
}

Tensor Batch::item(std::size_t i) const {
  const Shape& s = inputs.shape();
  Shape item_shape(s.begin() + 1, s.end());
  const std::size_t n = shape_size(item_shape);
  std::vector<double> buf(inputs.data() + i * n, inputs.data() + (i + 1) * n);
  return Tensor(std::move(item_shape), std::move(buf));
}

// ------------------------------------------------------------ heads

std::vector<double> accumulation(std::span<const std::vector<double>> features, std::span<const double> weights) {
  if (features.size() != weights.size() || features.empty()) {
    throw ShapeError(fmt::format("accumulation needs one weight per feature: {} features, {} weights",
                                 features.size(), weights.size()));
  }
  const std::size_t d = features[0].size();
  std::vector<double> out(d, 0.0);
  for (std::size_t h = 0; h < features.size(); ++h) {
    if (features[h].size() != d) throw ShapeError("accumulation features differ in length");
    for (std::size_t k = 0; k < d; ++k) out[k] += weights[h] * features[h][k];
  }
  return out;
}

double aggregation(std::span<const double> backbone, std::span<const double> accumulated) {
  if (backbone.size() != accumulated.size() || backbone.empty()) {
    throw ShapeError(fmt::format("aggregation lengths differ: {} vs {}", backbone.size(), accumulated.size()));
  }
  double s = 0.0;
  for (std::size_t k = 0; k < backbone.size(); ++k) s += backbone[k] * accumulated[k];
  return s / static_cast<double>(backbone.size());
}

double rmse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) {
    throw ShapeError(fmt::format("rmse length mismatch: {} vs {}", predictions.size(), targets.size()));
  }
  if (predictions.empty()) throw ShapeError("rmse of an empty set");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - targets[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(predictions.size()));
}

// ------------------------------------------------------------ Model

struct Model::Trace {
  ForwardResult norm, stem, pool;
  struct BlockTrace {
    ForwardResult a, ra, b, s, add, out;
  };
  std::vector<BlockTrace> blocks;
  std::vector<ForwardResult> gaps, projections;
  ForwardResult tail, head;
  std::vector<std::vector<double>> branch_features;
  std::vector<double> accumulated;
};

Model::Model(ModelKind kind, FADNetConfig cfg) : kind_(kind), cfg_(cfg) {
  cfg_.validate();
  auto add_layer = [&](const std::string& name, const LayerSpec& spec) {
    const std::size_t first = layout_.size();
    const auto shapes = spec.param_shapes();
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      layout_.push_back(ParamInfo{fmt::format("{}.{}", name, k == 0 ? "weight" : "bias"), shapes[k], 0});
    }
    return first;
  };

  norm_ = LayerSpec::input_norm();
  const std::size_t stem_pad = cfg_.stem_kernel / 2;
  stem_ = LayerSpec::conv2d(cfg_.channels, cfg_.widths[0], cfg_.stem_kernel, cfg_.stem_stride, stem_pad);
  pool_ = LayerSpec::maxpool2d(cfg_.pool_kernel, cfg_.pool_stride);
  gap_ = LayerSpec::gap();
  stem_param_ = add_layer("stem.conv", stem_);

  Shape shape = pool_.output_shape(stem_.output_shape(cfg_.input_shape()));
  std::size_t in_ch = cfg_.widths[0];
  for (std::size_t h = 0; h < cfg_.widths.size(); ++h) {
    const std::size_t ch = cfg_.widths[h];
    Block b{LayerSpec::conv2d(in_ch, ch, 3, 2, 1), LayerSpec::relu(),        LayerSpec::conv2d(ch, ch, 3, 1, 1),
            LayerSpec::conv2d(in_ch, ch, 1, 2, 0), LayerSpec::residual_add(), LayerSpec::relu(),
            0, 0, 0};
    const std::string prefix = fmt::format("block{}", h + 1);
    b.conv_a_param = add_layer(prefix + ".conv_a", b.conv_a);
    b.conv_b_param = add_layer(prefix + ".conv_b", b.conv_b);
    b.shortcut_param = add_layer(prefix + ".shortcut", b.shortcut);
    shape = b.conv_b.output_shape(b.conv_a.output_shape(shape));
    blocks_.push_back(b);
    in_ch = ch;
  }
  flat_features_ = shape_size(shape);
  tail_ = LayerSpec::fc(flat_features_, cfg_.feature_dim);
  tail_param_ = add_layer("tail.fc", tail_);

  if (kind_ == ModelKind::fadnet) {
    for (std::size_t h = 0; h < cfg_.widths.size(); ++h) {
      projections_.push_back(LayerSpec::fc(cfg_.widths[h], cfg_.feature_dim, false));
      projection_param_.push_back(add_layer(fmt::format("branch{}.proj", h + 1), projections_.back()));
    }
    accum_param_ = layout_.size();
    layout_.push_back(ParamInfo{"accumulation.w", {cfg_.branches}, 0});
  } else {
    head_ = LayerSpec::fc(cfg_.feature_dim, 1);
    head_param_ = add_layer("head.fc", head_);
  }

  std::size_t offset = 0;
  for (auto& info : layout_) {
    info.offset = offset;
    offset += info.size();
  }
  total_ = offset;
}

std::vector<double> Model::init(std::uint64_t seed) const {
  ModelParams p(layout_);
  auto he = [&](std::size_t index, const LayerSpec& spec, std::uint64_t stream) {
    auto ps = init_params(spec, mix_seed(seed, stream));
    for (std::size_t k = 0; k < ps.size(); ++k) p.tensor(index + k) = std::move(ps[k]);
  };
  std::uint64_t stream = 0;
  he(stem_param_, stem_, stream++);
  for (const auto& b : blocks_) {
    he(b.conv_a_param, b.conv_a, stream++);
    he(b.conv_b_param, b.conv_b, stream++);
    he(b.shortcut_param, b.shortcut, stream++);
  }
  he(tail_param_, tail_, stream++);
  if (kind_ == ModelKind::fadnet) {
    for (std::size_t h = 0; h < projections_.size(); ++h) he(projection_param_[h], projections_[h], stream++);
    for (double& v : p.tensor(accum_param_).values()) v = 1.0 / static_cast<double>(cfg_.branches);
  } else {
    he(head_param_, head_, stream++);
  }
  return p.flatten();
}

void Model::check(std::span<const double> params, const Batch& batch) const {
  if (params.size() != total_) {
    throw ShapeError(fmt::format("parameter vector has {} values, model needs {}", params.size(), total_));
  }
  if (batch.size() == 0) throw ShapeError("empty batch");
  const Shape& s = batch.inputs.shape();
  if (s.size() != 4 || s[0] != batch.size() || s[1] != cfg_.height || s[2] != cfg_.width || s[3] != cfg_.channels) {
    throw ShapeError(fmt::format("batch shape {} does not match model input {} with {} items",
                                 shape_string(s), shape_string(cfg_.input_shape()), batch.size()));
  }
}

double Model::forward_item(const ModelParams& p, const Tensor& image, Trace& t) const {
  t.norm = forward(norm_, {}, image);
  t.stem = forward(stem_, p.slice(stem_param_, 2), t.norm.output);
  t.pool = forward(pool_, {}, t.stem.output);
  const Tensor* x = &t.pool.output;
  t.blocks.resize(blocks_.size());
  for (std::size_t h = 0; h < blocks_.size(); ++h) {
    const Block& b = blocks_[h];
    auto& bt = t.blocks[h];
    bt.a = forward(b.conv_a, p.slice(b.conv_a_param, 2), *x);
    bt.ra = forward(b.relu_a, {}, bt.a.output);
    bt.b = forward(b.conv_b, p.slice(b.conv_b_param, 2), bt.ra.output);
    bt.s = forward(b.shortcut, p.slice(b.shortcut_param, 2), *x);
    bt.add = forward(b.add, {}, bt.b.output, &bt.s.output);
    bt.out = forward(b.relu_out, {}, bt.add.output);
    x = &bt.out.output;
  }
  t.tail = forward(tail_, p.slice(tail_param_, 2), *x);
  const auto& fs = t.tail.output.storage();

  if (kind_ == ModelKind::backbone_only) {
    t.head = forward(head_, p.slice(head_param_, 2), t.tail.output);
    return t.head.output[0];
  }
  t.gaps.resize(blocks_.size());
  t.projections.resize(blocks_.size());
  t.branch_features.resize(blocks_.size());
  for (std::size_t h = 0; h < blocks_.size(); ++h) {
    t.gaps[h] = forward(gap_, {}, t.blocks[h].out.output);
    t.projections[h] = forward(projections_[h], p.slice(projection_param_[h], 1), t.gaps[h].output);
    t.branch_features[h] = t.projections[h].output.storage();
  }
  t.accumulated = accumulation(t.branch_features, p.tensor(accum_param_).values());
  return aggregation(fs, t.accumulated);
}

namespace {

void add_into(std::span<double> grad, const std::vector<ParamInfo>& layout, std::size_t first,
              const std::vector<Tensor>& grads) {
  for (std::size_t k = 0; k < grads.size(); ++k) {
    double* dst = grad.data() + layout[first + k].offset;
    const auto& g = grads[k];
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

void accumulate(Tensor& into, const Tensor& g) {
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace

void Model::backward_item(const ModelParams& p, const Trace& t, double grad_pred, std::span<double> grad) const {
  Tensor g_fs(Shape{cfg_.feature_dim});
  std::vector<Tensor> g_block_out;
  for (const auto& bt : t.blocks) g_block_out.emplace_back(bt.out.output.shape());

  if (kind_ == ModelKind::backbone_only) {
    auto hb = backward(head_, t.head.cache, Tensor(Shape{1}, {grad_pred}));
    add_into(grad, layout_, head_param_, hb.grad_params);
    g_fs = std::move(hb.grad_input);
  } else {
    const auto& fs = t.tail.output.storage();
    const double inv_d = 1.0 / static_cast<double>(cfg_.feature_dim);
    std::vector<double> g_fc(cfg_.feature_dim);
    for (std::size_t k = 0; k < cfg_.feature_dim; ++k) {
      g_fs[k] = grad_pred * t.accumulated[k] * inv_d;
      g_fc[k] = grad_pred * fs[k] * inv_d;
    }
    const auto w = p.tensor(accum_param_).values();
    double* gw = grad.data() + layout_[accum_param_].offset;
    for (std::size_t h = 0; h < blocks_.size(); ++h) {
      const auto& fh = t.branch_features[h];
      double dot = 0.0;
      Tensor g_fh(Shape{cfg_.feature_dim});
      for (std::size_t k = 0; k < cfg_.feature_dim; ++k) {
        dot += g_fc[k] * fh[k];
        g_fh[k] = w[h] * g_fc[k];
      }
      gw[h] += dot;
      auto pb = backward(projections_[h], t.projections[h].cache, g_fh);
      add_into(grad, layout_, projection_param_[h], pb.grad_params);
      auto gb = backward(gap_, t.gaps[h].cache, pb.grad_input);
      accumulate(g_block_out[h], gb.grad_input);
    }
  }

  auto tb = backward(tail_, t.tail.cache, g_fs);
  add_into(grad, layout_, tail_param_, tb.grad_params);
  accumulate(g_block_out.back(), tb.grad_input.reshaped(g_block_out.back().shape()));

  Tensor g_x;
  for (std::size_t h = blocks_.size(); h-- > 0;) {
    const Block& b = blocks_[h];
    const auto& bt = t.blocks[h];
    Tensor g_out = std::move(g_block_out[h]);
    if (!g_x.empty()) accumulate(g_out, g_x);
    auto r_out = backward(b.relu_out, bt.out.cache, g_out);
    auto r_add = backward(b.add, bt.add.cache, r_out.grad_input);
    auto r_b = backward(b.conv_b, bt.b.cache, r_add.grad_input);
    add_into(grad, layout_, b.conv_b_param, r_b.grad_params);
    auto r_ra = backward(b.relu_a, bt.ra.cache, r_b.grad_input);
    auto r_a = backward(b.conv_a, bt.a.cache, r_ra.grad_input);
    add_into(grad, layout_, b.conv_a_param, r_a.grad_params);
    auto r_s = backward(b.shortcut, bt.s.cache, r_add.grad_skip);
    add_into(grad, layout_, b.shortcut_param, r_s.grad_params);
    g_x = std::move(r_a.grad_input);
    accumulate(g_x, r_s.grad_input);
  }
  auto r_pool = backward(pool_, t.pool.cache, g_x);
  auto r_stem = backward(stem_, t.stem.cache, r_pool.grad_input);
  add_into(grad, layout_, stem_param_, r_stem.grad_params);
}

std::vector<double> Model::predict(std::span<const double> params, const Batch& batch) const {
  check(params, batch);
  const auto p = ModelParams::unflatten(layout_, params);
  std::vector<double> out(batch.size());
  Trace t;
  for (std::size_t i = 0; i < batch.size(); ++i) out[i] = forward_item(p, batch.item(i), t);
  return out;
}

LossGrad Model::loss_and_grad(std::span<const double> params, const Batch& batch) const {
  check(params, batch);
  const auto p = ModelParams::unflatten(layout_, params);
  LossGrad r;
  r.grad.assign(total_, 0.0);
  r.predictions.resize(batch.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Trace t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double pred = forward_item(p, batch.item(i), t);
    r.predictions[i] = pred;
    const double err = pred - batch.targets[i];
    r.loss += err * err;
    backward_item(p, t, 2.0 * err * inv_b, r.grad);
  }
  r.loss *= inv_b;
  return r;
}

double Model::loss(std::span<const double> params, const Batch& batch, std::vector<std::size_t>* pattern) const {
  check(params, batch);
  const auto p = ModelParams::unflatten(layout_, params);
  if (pattern) pattern->clear();
  auto append = [&](const ForwardResult& r) {
    const auto& a = r.cache.activation_pattern();
    pattern->insert(pattern->end(), a.begin(), a.end());
  };
  Trace t;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double err = forward_item(p, batch.item(i), t) - batch.targets[i];
    total += err * err;
    if (pattern) {
      append(t.pool);
      for (const auto& bt : t.blocks) {
        append(bt.ra);
        append(bt.out);
      }
    }
  }
  return total / static_cast<double>(batch.size());
}

std::vector<double> fadnet_forward(const FADNetConfig& cfg, std::span<const double> params, const Batch& batch) {
  return Model(ModelKind::fadnet, cfg).predict(params, batch);
}

std::vector<double> backbone_only_forward(const FADNetConfig& cfg, std::span<const double> params,
                                          const Batch& batch) {
  return Model(ModelKind::backbone_only, cfg).predict(params, batch);
}

LossGrad loss_and_grad(ModelKind kind, const FADNetConfig& cfg, std::span<const double> params, const Batch& batch) {
  return Model(kind, cfg).loss_and_grad(params, batch);
}

ModelGradCheck model_grad_check(const Model& model, std::span<const double> params, const Batch& batch,
                                std::size_t stride) {
  const auto analytic = model.loss_and_grad(params, batch).grad;
  std::vector<std::size_t> base_pattern, pattern;
  model.loss(params, batch, &base_pattern);
  std::vector<double> theta(params.begin(), params.end());
  const double h = kFiniteDifferenceStep;
  ModelGradCheck r;
  for (std::size_t i = 0; i < theta.size(); i += std::max<std::size_t>(stride, 1)) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double up = model.loss(theta, batch, &pattern);
    const bool up_same = pattern == base_pattern;
    theta[i] = saved - h;
    const double down = model.loss(theta, batch, &pattern);
    const bool down_same = pattern == base_pattern;
    theta[i] = saved;
    if (!up_same || !down_same) {
      ++r.skipped_kinks;
      continue;
    }
    ++r.checked;
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return r;
}

}  // namespace dflsim
