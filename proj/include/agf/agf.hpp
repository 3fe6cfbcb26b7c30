#pragma once

// Attribution-guided factorization (AGF) explanations.
//
// Two streams run from the logits down to the image. The gradient stream is
// ordinary backprop of a re-weighted class score. The attribution stream
// carries Φ⁽ⁿ⁾, the class attribution for the input of layer n: at every
// parametric layer it is propagated with the absolute-influence rule (C) and
// then shifted by a residual built from the input-agnostic rule (A), the
// attribution-guided factorizations of the activations (F_x) and the
// gradients (F_∇x) and the input-gradient interaction (M). The shift keeps
// Σ Φ⁽ⁿ⁾ constant across layers.

#include <cmath>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "agf/attribution.hpp"
#include "agf/backprop.hpp"
#include "agf/core.hpp"
#include "agf/factorization.hpp"
#include "agf/model.hpp"

namespace agf {

enum class ResidualMode {
  guided,   // A + F_∇x + (F_x + M)·sigmoid(C)
  gradcam,  // Grad-CAM map of the layer input
};

/// Residual components. Each flag maps to one ablation column; all enabled
/// is the full method.
struct AgfConfig {
  bool use_A = true;
  bool use_Fx = true;
  bool use_Fgrad = true;
  bool use_M = true;
  bool use_gate = true;
  ResidualMode residual = ResidualMode::guided;

  static AgfConfig only_c() { return {false, false, false, false, true, ResidualMode::guided}; }

  bool operator==(const AgfConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Initial attribution
// ---------------------------------------------------------------------------

namespace detail {

/// Gaussian closeness of every logit to yᵗ; σ = maxᵢ|yᵢ - yᵗ| (σ = 0 gives 1).
inline double closeness_scale(const Tensor& y, std::size_t t) {
  double sigma = 0.0;
  for (double v : y.values()) sigma = std::max(sigma, std::abs(v - y[t]));
  return sigma;
}

inline std::vector<double> softmax(const std::vector<double>& u) {
  const double m = *std::max_element(u.begin(), u.end());
  std::vector<double> p(u.size());
  double z = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) z += (p[i] = std::exp(u[i] - m));
  for (double& v : p) v /= z;
  return p;
}

}  // namespace detail

/// ŷ = softmax(yᵗ · exp(-½((y - yᵗ)/σ)²)).
inline Tensor reweighted_scores(const Tensor& y, std::size_t t) {
  if (t >= y.size()) throw shape_error("target class out of range");
  const double sigma = detail::closeness_scale(y, t);
  std::vector<double> u(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = sigma > 0.0 ? (y[i] - y[t]) / sigma : 0.0;
    u[i] = y[t] * std::exp(-0.5 * d * d);
  }
  return Tensor(y.shape(), detail::softmax(u));
}

/// ∂ŷᵗ/∂y, differentiating through the softmax and the Gaussian weights with
/// σ held fixed.
inline Tensor reweighted_seed(const Tensor& y, std::size_t t) {
  const Tensor p = reweighted_scores(y, t);
  const double sigma = detail::closeness_scale(y, t);
  const double yt = y[t];
  Tensor seed(y.shape(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dyt_du = p[t] * ((i == t ? 1.0 : 0.0) - p[i]);  // ∂ŷᵗ/∂uᵢ
    if (i == t) {
      seed[t] += dyt_du;
      continue;
    }
    if (sigma == 0.0) {
      seed[t] += dyt_du;  // uᵢ = yᵗ
      continue;
    }
    const double d = (y[i] - yt) / sigma;
    const double w = std::exp(-0.5 * d * d);
    seed[i] += dyt_du * (-yt * w * d / sigma);
    seed[t] += dyt_du * (w + yt * w * d / sigma);
  }
  return seed;
}

struct InitialAttribution {
  Tensor seed;          // ∂ŷᵗ/∂y
  GradientTrace grads;  // gradients of ŷᵗ for every layer input
  Tensor phi;           // Φ¹ = x⁽¹⁾ ⊙ ∇x⁽¹⁾
};

inline InitialAttribution initial_attribution(const ForwardTrace& trace, const Model& model, std::size_t t) {
  if (t >= model.class_count) throw shape_error("target class out of range");
  InitialAttribution init;
  init.seed = reweighted_seed(trace.logits, t);
  init.grads = backward(model, trace, init.seed);
  init.phi = hadamard(trace.input_at(1), init.grads.grad_at(1));
  return init;
}

// ---------------------------------------------------------------------------
// Per-layer steps
// ---------------------------------------------------------------------------

/// M = N_max((1/C Σ_c x_c ⊙ ∇x_c)⁺), an H×W map.
inline Tensor input_gradient_interaction(const Tensor& x, const Tensor& grad) {
  return normalize_max(positive_part(channel_mean_reduce(hadamard(x, grad))));
}

/// Intermediate maps of one convolution step, kept for inspection.
struct ConvStepParts {
  Tensor C;
  Tensor A;      // empty when disabled
  Tensor Fx;     // H×W
  Tensor Fgrad;  // H×W
  Tensor M;      // H×W
  Tensor residual;
  Tensor phi;
};

inline ConvStepParts conv_step_parts(const Conv2d& conv, const Tensor& x, const Tensor& grad,
                                     const Tensor& phi_prev, const AgfConfig& cfg) {
  require_same_shape(x, grad, "conv step");
  const Layer layer{conv};
  ConvStepParts p;
  p.C = generic_rule(layer, x, phi_prev, kAbsoluteInfluenceRule);
  const std::size_t h = x.shape()[1], w = x.shape()[2];

  if (cfg.residual == ResidualMode::gradcam) {
    p.residual = broadcast_channels(grad_cam_map(x, grad), x.shape()[0]);
  } else {
    p.residual = Tensor(x.shape(), 0.0);
    if (cfg.use_A) {
      p.A = generic_rule(layer, x, phi_prev, kInputAgnosticRule);
      p.residual = add(p.residual, p.A);
    }
    if (cfg.use_Fgrad) {
      p.Fgrad = normalize_max(positive_part(guided_factorization(grad, p.C)));
      p.residual = add(p.residual, p.Fgrad);
    }
    Tensor salient({h, w}, 0.0);
    if (cfg.use_Fx) {
      p.Fx = normalize_max(positive_part(guided_factorization(x, p.C)));
      salient = add(salient, p.Fx);
    }
    if (cfg.use_M) {
      p.M = input_gradient_interaction(x, grad);
      salient = add(salient, p.M);
    }
    if (cfg.use_Fx || cfg.use_M) {
      Tensor term = broadcast_channels(salient, x.shape()[0]);
      if (cfg.use_gate) term = hadamard(term, heaviside_surrogate(p.C));
      p.residual = add(p.residual, term);
    }
  }
  p.phi = delta_shift(p.C, p.residual);
  return p;
}

inline Tensor conv_layer_step(const Conv2d& conv, const Tensor& x, const Tensor& grad, const Tensor& phi_prev,
                              const AgfConfig& cfg = {}) {
  return conv_step_parts(conv, x, grad, phi_prev, cfg).phi;
}

/// Linear layers shift only by M, and only for the layer fed by the flatten
/// (`is_first_linear`), where x and ∇x are viewed in their pre-flatten
/// C×H×W form given by `spatial_shape`. Elsewhere the residual is zero.
inline Tensor linear_layer_step(const Linear& fc, const Tensor& x, const Tensor& grad, const Tensor& phi_prev,
                                bool is_first_linear, const std::optional<Shape>& spatial_shape = std::nullopt,
                                const AgfConfig& cfg = {}) {
  if (x.rank() != 1) throw shape_error("linear step expects a vector input, got " + to_string(x.shape()));
  require_same_shape(x, grad, "linear step");
  const Tensor C = generic_rule(Layer{fc}, x, phi_prev, kAbsoluteInfluenceRule);
  if (!is_first_linear) return delta_shift(C, Tensor(C.shape(), 0.0));

  if (!spatial_shape || spatial_shape->size() != 3 || volume(*spatial_shape) != x.size())
    throw shape_error("first linear layer needs the C×H×W shape its input was flattened from");
  const Tensor x3 = x.reshaped(*spatial_shape);
  const Tensor g3 = grad.reshaped(*spatial_shape);
  Tensor residual(x.shape(), 0.0);
  if (cfg.residual == ResidualMode::gradcam) {
    residual = broadcast_channels(grad_cam_map(x3, g3), x3.shape()[0]).reshaped(x.shape());
  } else if (cfg.use_M) {
    residual = broadcast_channels(input_gradient_interaction(x3, g3), x3.shape()[0]).reshaped(x.shape());
  }
  return delta_shift(C, residual);
}

/// Shape a linear layer's input had before the nearest flatten, if the
/// layer is fed by one (ReLUs in between are skipped).
inline std::optional<Shape> pre_flatten_shape(const Model& model, std::size_t exec) {
  const auto shapes = model.shapes();
  for (std::size_t k = exec; k-- > 0;) {
    if (std::holds_alternative<Relu>(model.layers[k])) continue;
    if (std::holds_alternative<Flatten>(model.layers[k]) && shapes[k].size() == 3) return shapes[k];
    return std::nullopt;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct Explanation {
  Tensor heatmap;                   // signed H×W (channel sum of the input attribution)
  Tensor input_attribution;         // Φ⁽ᴺ⁾, shape of the model input
  std::vector<double> layer_sums;   // Σ Φ⁽ⁿ⁾ for n = 1..N
  Tensor seed;
};

/// Explains class t for an existing forward pass.
inline Explanation explain_trace(const Model& model, const ForwardTrace& trace, std::size_t t,
                                 const AgfConfig& cfg = {}) {
  if (trace.inputs.size() != model.layers.size()) throw shape_error("trace does not belong to model");
  auto init = initial_attribution(trace, model, t);

  Explanation out;
  out.seed = init.seed;
  Tensor phi = std::move(init.phi);
  out.layer_sums.push_back(sum(phi));
  const std::size_t depth = model.depth();
  for (std::size_t n = 2; n <= depth; ++n) {
    const std::size_t k = depth - n;
    const Tensor& x = trace.inputs[k];
    const Tensor& g = init.grads.grads[k];
    const Layer& layer = model.layers[k];
    if (const auto* conv = std::get_if<Conv2d>(&layer)) {
      phi = conv_layer_step(*conv, x, g, phi, cfg);
    } else if (const auto* fc = std::get_if<Linear>(&layer)) {
      const auto spatial = pre_flatten_shape(model, k);
      phi = linear_layer_step(*fc, x, g, phi, spatial.has_value(), spatial, cfg);
    } else {
      phi = generic_rule(layer, x, phi, kAbsoluteInfluenceRule);
    }
    out.layer_sums.push_back(sum(phi));
  }

  out.input_attribution = phi;
  if (phi.rank() == 3)
    out.heatmap = channel_sum_reduce(phi);
  else if (phi.rank() == 2)
    out.heatmap = phi;
  else
    out.heatmap = phi.reshaped({1, phi.size()});
  return out;
}

inline Explanation explain(const Model& model, const Tensor& image, std::size_t t, const AgfConfig& cfg = {}) {
  return explain_trace(model, forward(model, image), t, cfg);
}

}  // namespace agf
