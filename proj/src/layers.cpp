#include "dflsim/layers.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "dflsim/random.hpp"

namespace dflsim {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input_norm: return "input_norm";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::fc: return "fc";
    case LayerKind::gap: return "gap";
    case LayerKind::residual_add: return "residual_add";
  }
  return "unknown";
}

LayerSpec LayerSpec::input_norm() { return LayerSpec{.kind = LayerKind::input_norm}; }

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride, std::size_t padding, bool bias) {
  LayerSpec s{.kind = LayerKind::conv2d,
              .in_channels = in_channels,
              .out_channels = out_channels,
              .kernel = kernel,
              .stride = stride,
              .padding = padding,
              .bias = bias};
  s.validate();
  return s;
}

LayerSpec LayerSpec::maxpool2d(std::size_t kernel, std::size_t stride) {
  LayerSpec s{.kind = LayerKind::maxpool2d, .kernel = kernel, .stride = stride};
  s.validate();
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{.kind = LayerKind::relu}; }

LayerSpec LayerSpec::fc(std::size_t in_features, std::size_t out_features, bool bias) {
  LayerSpec s{.kind = LayerKind::fc, .in_features = in_features, .out_features = out_features, .bias = bias};
  s.validate();
  return s;
}

LayerSpec LayerSpec::gap() { return LayerSpec{.kind = LayerKind::gap}; }

LayerSpec LayerSpec::residual_add() { return LayerSpec{.kind = LayerKind::residual_add}; }

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::conv2d:
      if (in_channels == 0 || out_channels == 0) throw ShapeError("conv2d channels must be positive");
      [[fallthrough]];
    case LayerKind::maxpool2d:
      if (kernel < 1) throw ShapeError("kernel must be >= 1");
      if (stride < 1) throw ShapeError("stride must be >= 1");
      break;
    case LayerKind::fc:
      if (in_features == 0 || out_features == 0) throw ShapeError("fc widths must be positive");
      break;
    default:
      break;
  }
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

void require_image(const LayerSpec& l, const Shape& in) {
  if (in.size() != 3) {
    throw ShapeError(fmt::format("{} expects (height, width, channels), got {}", to_string(l.kind), shape_string(in)));
  }
}

}  // namespace

Shape LayerSpec::output_shape(const Shape& in) const {
  validate();
  switch (kind) {
    case LayerKind::input_norm:
    case LayerKind::relu:
    case LayerKind::residual_add:
      return in;
    case LayerKind::conv2d:
    case LayerKind::maxpool2d: {
      require_image(*this, in);
      if (kind == LayerKind::conv2d && in[2] != in_channels) {
        throw ShapeError(fmt::format("conv2d expects {} input channels, got {}", in_channels, in[2]));
      }
      const std::size_t pad = kind == LayerKind::conv2d ? padding : 0;
      const auto oh = conv_output_extent(in[0], kernel, stride, pad);
      const auto ow = conv_output_extent(in[1], kernel, stride, pad);
      if (oh == 0 || ow == 0) {
        throw ShapeError(fmt::format("{} window {} does not fit input {}", to_string(kind), kernel, shape_string(in)));
      }
      return {oh, ow, kind == LayerKind::conv2d ? out_channels : in[2]};
    }
    case LayerKind::fc:
      if (shape_size(in) != in_features) {
        throw ShapeError(fmt::format("fc expects {} inputs, got shape {}", in_features, shape_string(in)));
      }
      return {out_features};
    case LayerKind::gap:
      require_image(*this, in);
      return {in[2]};
  }
  throw ShapeError("unknown layer kind");
}

std::vector<Shape> LayerSpec::param_shapes() const {
  std::vector<Shape> shapes;
  if (kind == LayerKind::conv2d) {
    shapes.push_back({kernel, kernel, in_channels, out_channels});
    if (bias) shapes.push_back({out_channels});
  } else if (kind == LayerKind::fc) {
    shapes.push_back({out_features, in_features});
    if (bias) shapes.push_back({out_features});
  }
  return shapes;
}

std::size_t LayerSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& s : param_shapes()) n += shape_size(s);
  return n;
}

struct LayerOps {
  static ForwardResult run(const LayerSpec& l, std::span<const Tensor> params, const Tensor& x, const Tensor* skip) {
    const Shape out_shape = l.output_shape(x.shape());
    const auto expected = l.param_shapes();
    if (params.size() != expected.size()) {
      throw ShapeError(fmt::format("{} expects {} parameter tensors, got {}", to_string(l.kind), expected.size(),
                                   params.size()));
    }
    for (std::size_t k = 0; k < expected.size(); ++k) {
      if (params[k].shape() != expected[k]) {
        throw ShapeError(fmt::format("{} parameter {} has shape {}, expected {}", to_string(l.kind), k,
                                     shape_string(params[k].shape()), shape_string(expected[k])));
      }
    }
    if ((l.kind == LayerKind::residual_add) != (skip != nullptr)) {
      throw ShapeError("residual_add takes exactly one skip input; other layers take none");
    }
    if (skip && skip->shape() != x.shape()) {
      throw ShapeError(fmt::format("residual_add shapes differ: {} vs {}", shape_string(x.shape()),
                                   shape_string(skip->shape())));
    }

    ForwardResult r{Tensor(out_shape), LayerCache{}};
    LayerCache& c = r.cache;
    c.spec_ = l;
    c.params_ = params;
    c.output_shape_ = out_shape;
    Tensor& y = r.output;

    switch (l.kind) {
      case LayerKind::input_norm: {
        const auto n = static_cast<double>(x.size());
        double mean = 0.0;
        for (double v : x.values()) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : x.values()) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / n);
        const double denom = sd + kInputNormEpsilon;
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / denom;
        c.mean_ = mean;
        c.stddev_ = sd;
        c.input_ = x;
        break;
      }
      case LayerKind::conv2d:
        conv_forward(l, params, x, y);
        c.input_ = x;
        break;
      case LayerKind::maxpool2d:
        maxpool_forward(l, x, y, c.pattern_);
        c.input_ = Tensor(x.shape());
        break;
      case LayerKind::relu:
        c.pattern_.assign(x.size(), 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const bool on = x[i] > 0.0;
          y[i] = on ? x[i] : 0.0;
          c.pattern_[i] = on ? 1 : 0;
        }
        break;
      case LayerKind::fc: {
        const auto& w = params[0];
        const std::size_t in = l.in_features;
        for (std::size_t o = 0; o < l.out_features; ++o) {
          double acc = l.bias ? params[1][o] : 0.0;
          const double* row = w.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
          y[o] = acc;
        }
        c.input_ = x;
        break;
      }
      case LayerKind::gap: {
        const std::size_t hw = x.dim(0) * x.dim(1), ch = x.dim(2);
        for (std::size_t p = 0; p < hw; ++p) {
          for (std::size_t k = 0; k < ch; ++k) y[k] += x[p * ch + k];
        }
        for (std::size_t k = 0; k < ch; ++k) y[k] /= static_cast<double>(hw);
        c.input_ = Tensor(x.shape());
        break;
      }
      case LayerKind::residual_add:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + (*skip)[i];
        c.skip_shape_ = skip->shape();
        break;
    }
    if (l.kind == LayerKind::relu || l.kind == LayerKind::residual_add) c.input_ = Tensor(x.shape());
    c.valid_ = true;
    return r;
  }

  static BackwardResult run_backward(const LayerSpec& l, const LayerCache& c, const Tensor& g) {
    if (!c.valid_ || !(c.spec_ == l)) throw ShapeError(fmt::format("stale cache for {} backward", to_string(l.kind)));
    if (g.shape() != c.output_shape_) {
      throw ShapeError(fmt::format("{} backward: grad shape {} does not match output {}", to_string(l.kind),
                                   shape_string(g.shape()), shape_string(c.output_shape_)));
    }
    const Tensor& x = c.input_;
    BackwardResult r{Tensor(x.shape()), {}, {}};
    Tensor& gx = r.grad_input;
    for (const auto& s : l.param_shapes()) r.grad_params.emplace_back(s);

    switch (l.kind) {
      case LayerKind::input_norm: {
        const auto n = static_cast<double>(x.size());
        const double denom = c.stddev_ + kInputNormEpsilon;
        double gmean = 0.0, gdot = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          gmean += g[i];
          gdot += g[i] * (x[i] - c.mean_);
        }
        gmean /= n;
        // The std term has no derivative for a constant input; its
        // contribution is taken as zero there.
        const double coupling = c.stddev_ > 0.0 ? gdot / (n * c.stddev_ * denom * denom) : 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          gx[i] = (g[i] - gmean) / denom - (x[i] - c.mean_) * coupling;
        }
        break;
      }
      case LayerKind::conv2d:
        conv_backward(l, c.params_, x, g, r);
        break;
      case LayerKind::maxpool2d:
        for (std::size_t o = 0; o < g.size(); ++o) gx[c.pattern_[o]] += g[o];
        break;
      case LayerKind::relu:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = c.pattern_[i] ? g[i] : 0.0;
        break;
      case LayerKind::fc: {
        const auto& w = c.params_[0];
        const std::size_t in = l.in_features;
        auto& gw = r.grad_params[0];
        for (std::size_t o = 0; o < l.out_features; ++o) {
          const double go = g[o];
          const double* row = w.data() + o * in;
          double* grow = gw.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) {
            gx[i] += row[i] * go;
            grow[i] = go * x[i];
          }
          if (l.bias) r.grad_params[1][o] = go;
        }
        break;
      }
      case LayerKind::gap: {
        const std::size_t hw = x.dim(0) * x.dim(1), ch = x.dim(2);
        const double scale = 1.0 / static_cast<double>(hw);
        for (std::size_t p = 0; p < hw; ++p) {
          for (std::size_t k = 0; k < ch; ++k) gx[p * ch + k] = g[k] * scale;
        }
        break;
      }
      case LayerKind::residual_add:
        gx = g;
        r.grad_skip = g;
        break;
    }
    return r;
  }

  static void conv_forward(const LayerSpec& l, std::span<const Tensor> params, const Tensor& x, Tensor& y) {
    const std::size_t ih = x.dim(0), iw = x.dim(1), ci = l.in_channels, co = l.out_channels;
    const std::size_t oh = y.dim(0), ow = y.dim(1), k = l.kernel;
    const double* w = params[0].data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double* out = y.data() + (oy * ow + ox) * co;
        if (l.bias) std::copy_n(params[1].data(), co, out);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) - static_cast<std::ptrdiff_t>(l.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) - static_cast<std::ptrdiff_t>(l.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
            const double* in = x.data() + (static_cast<std::size_t>(iy) * iw + static_cast<std::size_t>(ix)) * ci;
            const double* wk = w + (ky * k + kx) * ci * co;
            for (std::size_t c = 0; c < ci; ++c) {
              const double v = in[c];
              const double* wc = wk + c * co;
              for (std::size_t o = 0; o < co; ++o) out[o] += v * wc[o];
            }
          }
        }
      }
    }
  }

  static void conv_backward(const LayerSpec& l, std::span<const Tensor> params, const Tensor& x, const Tensor& g,
                            BackwardResult& r) {
    const std::size_t ih = x.dim(0), iw = x.dim(1), ci = l.in_channels, co = l.out_channels;
    const std::size_t oh = g.dim(0), ow = g.dim(1), k = l.kernel;
    const double* w = params[0].data();
    double* gw = r.grad_params[0].data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* go = g.data() + (oy * ow + ox) * co;
        if (l.bias) {
          double* gb = r.grad_params[1].data();
          for (std::size_t o = 0; o < co; ++o) gb[o] += go[o];
        }
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) - static_cast<std::ptrdiff_t>(l.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) - static_cast<std::ptrdiff_t>(l.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
            const std::size_t base = (static_cast<std::size_t>(iy) * iw + static_cast<std::size_t>(ix)) * ci;
            const double* in = x.data() + base;
            double* gin = r.grad_input.data() + base;
            const std::size_t woff = (ky * k + kx) * ci * co;
            for (std::size_t c = 0; c < ci; ++c) {
              const double* wc = w + woff + c * co;
              double* gwc = gw + woff + c * co;
              const double v = in[c];
              double acc = 0.0;
              for (std::size_t o = 0; o < co; ++o) {
                acc += wc[o] * go[o];
                gwc[o] += v * go[o];
              }
              gin[c] += acc;
            }
          }
        }
      }
    }
  }

  static void maxpool_forward(const LayerSpec& l, const Tensor& x, Tensor& y, std::vector<std::size_t>& argmax) {
    const std::size_t iw = x.dim(1), ch = x.dim(2);
    const std::size_t oh = y.dim(0), ow = y.dim(1);
    argmax.assign(y.size(), 0);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t c = 0; c < ch; ++c) {
          std::size_t best = ((oy * l.stride) * iw + ox * l.stride) * ch + c;
          for (std::size_t ky = 0; ky < l.kernel; ++ky) {
            for (std::size_t kx = 0; kx < l.kernel; ++kx) {
              const std::size_t at = ((oy * l.stride + ky) * iw + ox * l.stride + kx) * ch + c;
              if (x[at] > x[best]) best = at;  // first maximum wins ties
            }
          }
          const std::size_t o = (oy * ow + ox) * ch + c;
          y[o] = x[best];
          argmax[o] = best;
        }
      }
    }
  }
};

ForwardResult forward(const LayerSpec& layer, std::span<const Tensor> params, const Tensor& input, const Tensor* skip) {
  return LayerOps::run(layer, params, input, skip);
}

BackwardResult backward(const LayerSpec& layer, const LayerCache& cache, const Tensor& grad_out) {
  return LayerOps::run_backward(layer, cache, grad_out);
}

std::vector<Tensor> init_params(const LayerSpec& layer, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> params;
  const auto shapes = layer.param_shapes();
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    Tensor t(shapes[k]);
    if (k == 0) {
      const std::size_t fan_in = layer.kind == LayerKind::conv2d ? layer.kernel * layer.kernel * layer.in_channels
                                                                  : layer.in_features;
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : t.values()) v = rng.normal(0.0, sd);
    }
    params.push_back(std::move(t));
  }
  return params;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

Shape default_check_shape(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv2d: return {l.kernel + 4, l.kernel + 3, l.in_channels};
    case LayerKind::maxpool2d: return {l.kernel + 2 * l.stride, l.kernel + 3 * l.stride, 2};
    case LayerKind::fc: return {l.in_features};
    case LayerKind::gap: return {4, 3, 3};
    default: return {3, 4, 2};
  }
}

bool far_from_kinks(const LayerSpec& l, const Tensor& x) {
  constexpr double margin = 1e-3;
  if (l.kind == LayerKind::relu) {
    return std::all_of(x.values().begin(), x.values().end(), [](double v) { return std::abs(v) > margin; });
  }
  if (l.kind == LayerKind::maxpool2d) {
    // Every window needs a unique maximum with a clear gap to the runner-up.
    const std::size_t iw = x.dim(1), ch = x.dim(2);
    const auto out = l.output_shape(x.shape());
    for (std::size_t oy = 0; oy < out[0]; ++oy) {
      for (std::size_t ox = 0; ox < out[1]; ++ox) {
        for (std::size_t c = 0; c < ch; ++c) {
          double first = -1e300, second = -1e300;
          for (std::size_t ky = 0; ky < l.kernel; ++ky) {
            for (std::size_t kx = 0; kx < l.kernel; ++kx) {
              const double v = x[((oy * l.stride + ky) * iw + ox * l.stride + kx) * ch + c];
              if (v > first) {
                second = first;
                first = v;
              } else if (v > second) {
                second = v;
              }
            }
          }
          if (l.kernel > 1 && first - second < margin) return false;
        }
      }
    }
  }
  return true;
}

}  // namespace

double grad_check(const LayerSpec& layer, std::uint64_t seed) {
  return grad_check(layer, default_check_shape(layer), seed);
}

double grad_check(const LayerSpec& layer, const Shape& input_shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> params = init_params(layer, mix_seed(seed, 1));
  for (auto& p : params) {
    for (double& v : p.values()) v += rng.normal(0.0, 0.1);  // nonzero biases too
  }
  const bool has_skip = layer.kind == LayerKind::residual_add;
  Tensor x(input_shape), skip;
  for (int attempt = 0;; ++attempt) {
    for (double& v : x.values()) v = rng.normal();
    if (has_skip) {
      skip = Tensor(input_shape);
      for (double& v : skip.values()) v = rng.normal();
    }
    if (far_from_kinks(layer, x)) break;
    if (attempt > 1000) throw ShapeError("grad_check could not sample a point away from kinks");
  }

  const Shape out_shape = layer.output_shape(input_shape);
  Tensor probe(out_shape);
  for (double& v : probe.values()) v = rng.normal();

  // Scalar objective: <probe, forward(x)>.
  auto objective = [&](const Tensor& in, std::span<const Tensor> ps, const Tensor* sk) {
    const auto r = forward(layer, ps, in, sk);
    double s = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) s += probe[i] * r.output[i];
    return s;
  };

  const auto fwd = forward(layer, params, x, has_skip ? &skip : nullptr);
  const auto bwd = backward(layer, fwd.cache, probe);
  const double h = kFiniteDifferenceStep;
  double worst = 0.0;

  auto check_coords = [&](Tensor& target, const Tensor& analytic) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      target[i] = saved + h;
      const double up = objective(x, params, has_skip ? &skip : nullptr);
      target[i] = saved - h;
      const double down = objective(x, params, has_skip ? &skip : nullptr);
      target[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
  };
  check_coords(x, bwd.grad_input);
  if (has_skip) check_coords(skip, bwd.grad_skip);
  for (std::size_t k = 0; k < params.size(); ++k) check_coords(params[k], bwd.grad_params[k]);
  return worst;
}

}  // namespace dflsim
