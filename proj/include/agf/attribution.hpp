#pragma once

#include <cmath>
#include <optional>
#include <type_traits>
#include <utility>
#include <variant>

#include "agf/backprop.hpp"
#include "agf/core.hpp"
#include "agf/model.hpp"

namespace agf {

// ---------------------------------------------------------------------------
// Generic propagation rule
// ---------------------------------------------------------------------------

enum class InputTransform { absolute, positive, ones, raw };
enum class WeightTransform { absolute, positive, raw };

struct GenericRuleConfig {
  InputTransform input = InputTransform::positive;
  WeightTransform weight = WeightTransform::positive;
  double epsilon = 1e-9;
  // Output neurons whose denominator is exactly zero pass their relevance on
  // as if the input were all ones instead of dropping it.
  bool ones_fallback = false;
};

inline constexpr GenericRuleConfig kLrpRule{InputTransform::positive, WeightTransform::positive, 1e-9};
// Both AGF rules have z >= 0, so ε only has to guard exact zeros. Keeping it
// tiny matters because the Δ-shift makes |Φ| much larger than ΣΦ, and the
// relevance swallowed by ε grows with |Φ|.
inline constexpr GenericRuleConfig kAbsoluteInfluenceRule{InputTransform::absolute, WeightTransform::absolute, 1e-15,
                                                         true};
inline constexpr GenericRuleConfig kInputAgnosticRule{InputTransform::ones, WeightTransform::absolute, 1e-15};

inline Tensor transform_input(const Tensor& x, InputTransform t) {
  switch (t) {
    case InputTransform::absolute: return abs(x);
    case InputTransform::positive: return positive_part(x);
    case InputTransform::ones: return Tensor(x.shape(), 1.0);
    case InputTransform::raw: return x;
  }
  return x;
}

inline Tensor transform_weight(const Tensor& w, WeightTransform t) {
  switch (t) {
    case WeightTransform::absolute: return abs(w);
    case WeightTransform::positive: return positive_part(w);
    case WeightTransform::raw: return w;
  }
  return w;
}

namespace detail {

/// r / (z + ε·sign(z)), with sign(0) taken as +1.
inline Tensor stabilized_ratio(const Tensor& r, const Tensor& z, double eps) {
  Tensor s = r;
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = r[i] / (z[i] >= 0.0 ? z[i] + eps : z[i] - eps);
  return s;
}

}  // namespace detail

/// Redistributes `r_prev` (relevance at the layer output) onto the layer input:
///
///   R_j = Σ_i X_j ∂L_i(X,Θ)/∂X_j · r_i / z_i,   z_i = L_i(X,Θ) without bias,
///
/// with X and Θ derived from the cached input `x` and the layer weights per
/// `cfg`. ReLU and flatten pass relevance through, max-pooling routes it to the
/// window winner and average pooling is treated as a linear layer with
/// uniform weights.
inline Tensor generic_rule(const Layer& layer, const Tensor& x, const Tensor& r_prev,
                           const GenericRuleConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) throw degenerate_input_error("generic rule stabilizer must be positive");
  const Shape out_shape = output_shape(layer, x.shape());
  if (r_prev.shape() != out_shape)
    throw shape_error(std::string(kind_name(layer)) + " relevance has shape " + to_string(r_prev.shape()) +
                      ", layer output is " + to_string(out_shape));

  // The linear part of the layer: z = L(X), back = Lᵀ(s).
  auto redistribute = [&](const Tensor& X, auto&& forward_map, auto&& transpose_map) {
    const Tensor z = forward_map(X);
    Tensor rel = hadamard(X, transpose_map(detail::stabilized_ratio(r_prev, z, cfg.epsilon)));
    if (!cfg.ones_fallback) return rel;
    Tensor dead(r_prev.shape(), 0.0);
    bool any = false;
    for (std::size_t i = 0; i < z.size(); ++i)
      if (z[i] == 0.0 && r_prev[i] != 0.0) {
        dead[i] = r_prev[i];
        any = true;
      }
    if (!any) return rel;
    const Tensor ones(x.shape(), 1.0);
    return add(rel, transpose_map(detail::stabilized_ratio(dead, forward_map(ones), cfg.epsilon)));
  };

  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2d>) {
          const Tensor W = transform_weight(l.weight, cfg.weight);
          return redistribute(
              transform_input(x, cfg.input), [&](const Tensor& X) { return conv2d(X, W, nullptr, l.stride, l.padding); },
              [&](const Tensor& s) { return conv2d_transpose(s, W, x.shape(), l.stride, l.padding); });
        } else if constexpr (std::is_same_v<T, Linear>) {
          const Tensor W = transform_weight(l.weight, cfg.weight);
          return redistribute(
              transform_input(x, cfg.input), [&](const Tensor& X) { return linear(X, W, nullptr); },
              [&](const Tensor& s) { return linear_transpose(s, W); });
        } else if constexpr (std::is_same_v<T, Relu>) {
          return r_prev;
        } else if constexpr (std::is_same_v<T, MaxPool2d>) {
          return maxpool2d_route(x, r_prev, l.kernel, l.stride);
        } else if constexpr (std::is_same_v<T, AvgPool2d>) {
          return redistribute(
              transform_input(x, cfg.input), [&](const Tensor& X) { return avgpool2d(X, l.kernel, l.stride); },
              [&](const Tensor& s) { return avgpool2d_transpose(s, x.shape(), l.kernel, l.stride); });
        } else {
          return r_prev.reshaped(x.shape());
        }
      },
      layer);
}

// ---------------------------------------------------------------------------
// Δ-shift
// ---------------------------------------------------------------------------

/// g + r - s·1[g≠0] with s = Σr / #{g≠0}. The subtraction only touches
/// positions where g is non-zero, so Σ output = Σ g. An H×W residual is
/// broadcast over the channels of a C×H×W g.
inline Tensor delta_shift(const Tensor& g, const Tensor& r) {
  const Tensor residual = (r.shape() != g.shape() && is_channel_broadcast(g.shape(), r.shape()))
                              ? broadcast_channels(r, g.shape()[0])
                              : r;
  require_same_shape(g, residual, "delta_shift");

  const double total = sum(residual);
  const std::size_t active = count_nonzero(g);
  Tensor out = g;
  if (active == 0) {
    if (total != 0.0)
      throw degenerate_input_error("delta_shift: residual sums to " + std::to_string(total) +
                                   " but the propagated map has no non-zero entries");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += residual[i];
    return out;
  }
  const double shift = total / static_cast<double>(active);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = g[i] + residual[i];
    if (g[i] != 0.0) out[i] -= shift;
  }
  return out;
}

// ---------------------------------------------------------------------------
// LRP family
// ---------------------------------------------------------------------------

/// Plain LRP start vector: zeros except yᵗ at the target.
inline Tensor lrp_initial_relevance(const Tensor& logits, std::size_t target) {
  if (target >= logits.size()) throw shape_error("target class out of range");
  Tensor r0(logits.shape(), 0.0);
  r0[target] = logits[target];
  return r0;
}

/// Runs `cfg` from the logits down to the model input, starting from `r0`.
inline Tensor propagate_relevance(const Model& model, const ForwardTrace& trace, const Tensor& r0,
                                  const GenericRuleConfig& cfg = kLrpRule) {
  if (trace.inputs.size() != model.layers.size()) throw shape_error("trace does not belong to model");
  if (r0.shape() != trace.logits.shape()) throw shape_error("initial relevance must match the logits");
  Tensor r = r0;
  for (std::size_t k = model.layers.size(); k-- > 0;) r = generic_rule(model.layers[k], trace.inputs[k], r, cfg);
  return r;
}

inline Tensor lrp(const Model& model, const ForwardTrace& trace, std::size_t target) {
  return propagate_relevance(model, trace, lrp_initial_relevance(trace.logits, target), kLrpRule);
}

struct ContrastiveInit {
  Tensor target;  // R⁽⁰⁾_tgt
  Tensor rest;    // R⁽⁰⁾_rst
};

inline ContrastiveInit clrp_initial_relevance(const Tensor& logits, std::size_t target) {
  if (logits.size() < 2) throw degenerate_input_error("CLRP needs at least two classes");
  ContrastiveInit init{lrp_initial_relevance(logits, target), Tensor(logits.shape(), 0.0)};
  const double denom = static_cast<double>(logits.size() - 1);
  for (std::size_t i = 0; i < logits.size(); ++i) init.rest[i] = (logits[i] - init.target[i]) / denom;
  return init;
}

/// a · Σb / Σa, or zeros when Σa = 0.
inline Tensor match_sum(const Tensor& a, const Tensor& b) {
  const double sa = sum(a);
  if (sa == 0.0) return Tensor(a.shape(), 0.0);
  return scale(a, sum(b) / sa);
}

inline Tensor clrp(const Model& model, const ForwardTrace& trace, std::size_t target) {
  if (model.class_count < 2) throw degenerate_input_error("CLRP needs at least two classes");
  const auto init = clrp_initial_relevance(trace.logits, target);
  const Tensor r_tgt = propagate_relevance(model, trace, init.target, kLrpRule);
  const Tensor r_rst = propagate_relevance(model, trace, init.rest, kLrpRule);
  return subtract(r_tgt, match_sum(r_rst, r_tgt));
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

/// (1/C · Σ_c x_c · Σ_hw ∇x_c)⁺ for a C×H×W activation and its gradient.
inline Tensor grad_cam_map(const Tensor& x, const Tensor& g) {
  if (x.rank() != 3) throw shape_error("grad_cam needs a C×H×W layer input, got " + to_string(x.shape()));
  require_same_shape(x, g, "grad_cam");
  const std::size_t channels = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
  Tensor cam({x.shape()[1], x.shape()[2]});
  for (std::size_t c = 0; c < channels; ++c) {
    double weight = 0.0;
    for (std::size_t p = 0; p < plane; ++p) weight += g[c * plane + p];
    for (std::size_t p = 0; p < plane; ++p) cam[p] += x[c * plane + p] * weight;
  }
  for (double& v : cam.values()) v = std::max(0.0, v / static_cast<double>(channels));
  return cam;
}

/// Grad-CAM on the input of layer n (reverse numbering).
inline Tensor grad_cam(const ForwardTrace& trace, const GradientTrace& grads, std::size_t n) {
  return grad_cam_map(trace.input_at(n), grads.grad_at(n));
}

/// Layer (reverse numbering) whose input is the rectified output of the last
/// convolution: the customary Grad-CAM target.
inline std::size_t default_gradcam_layer(const Model& model) {
  std::optional<std::size_t> last_conv;
  for (std::size_t k = 0; k < model.layers.size(); ++k)
    if (std::holds_alternative<Conv2d>(model.layers[k])) last_conv = k;
  if (!last_conv) throw shape_error("model has no convolution layer for Grad-CAM");
  std::size_t k = *last_conv + 1;
  while (k < model.layers.size() && std::holds_alternative<Relu>(model.layers[k])) ++k;
  if (k >= model.layers.size()) throw shape_error("last convolution feeds the logits directly");
  return model.paper_index(k);
}

/// Bilinear resampling of an H×W map (pixel-centre alignment).
inline Tensor resize_bilinear(const Tensor& map2d, std::size_t out_h, std::size_t out_w) {
  if (map2d.rank() != 2) throw shape_error("resize_bilinear expects an H×W map");
  const std::size_t in_h = map2d.shape()[0], in_w = map2d.shape()[1];
  if (in_h == out_h && in_w == out_w) return map2d;
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  auto sample = [](double pos, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(std::floor(pos));
    hi = std::min(lo + 1, n - 1);
    frac = pos - static_cast<double>(lo);
  };
  for (std::size_t r = 0; r < out_h; ++r) {
    std::size_t y0, y1;
    double fy;
    sample((static_cast<double>(r) + 0.5) * sy - 0.5, in_h, y0, y1, fy);
    for (std::size_t c = 0; c < out_w; ++c) {
      std::size_t x0, x1;
      double fx;
      sample((static_cast<double>(c) + 0.5) * sx - 0.5, in_w, x0, x1, fx);
      const double top = map2d[y0 * in_w + x0] * (1 - fx) + map2d[y0 * in_w + x1] * fx;
      const double bot = map2d[y1 * in_w + x0] * (1 - fx) + map2d[y1 * in_w + x1] * fx;
      out[r * out_w + c] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

}  // namespace agf
