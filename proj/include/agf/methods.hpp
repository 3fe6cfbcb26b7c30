#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "agf/agf.hpp"
#include "agf/attribution.hpp"
#include "agf/backprop.hpp"
#include "agf/core.hpp"
#include "agf/model.hpp"

namespace agf {

enum class Method { agf, lrp, clrp, gradcam, random };

/// How a method's map becomes a binary segmentation.
enum class Polarity {
  signed_map,     // foreground where the map is positive
  positive_only,  // foreground where the map exceeds its mean
};

inline Method parse_method(std::string_view name) {
  if (name == "agf") return Method::agf;
  if (name == "lrp") return Method::lrp;
  if (name == "clrp") return Method::clrp;
  if (name == "gradcam") return Method::gradcam;
  if (name == "random") return Method::random;
  throw data_error("unknown method '" + std::string(name) + "'");
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::agf: return "agf";
    case Method::lrp: return "lrp";
    case Method::clrp: return "clrp";
    case Method::gradcam: return "gradcam";
    case Method::random: return "random";
  }
  return "?";
}

inline Polarity polarity(Method m) {
  return (m == Method::agf || m == Method::clrp) ? Polarity::signed_map : Polarity::positive_only;
}

struct MethodOptions {
  AgfConfig agf;
  std::optional<std::size_t> gradcam_layer;  // reverse numbering; default: last conv block
  std::uint64_t seed = 0;                    // random baseline only
};

namespace detail {

inline std::uint64_t fnv1a(const Tensor& t, std::uint64_t h) {
  for (double v : t.values()) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(double); ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline Tensor spatial_heatmap(const Tensor& attribution) {
  if (attribution.rank() == 3) return channel_sum_reduce(attribution);
  if (attribution.rank() == 2) return attribution;
  throw shape_error("attribution has no spatial layout: " + to_string(attribution.shape()));
}

}  // namespace detail

/// Signed or positive H×W map (input resolution) explaining class `cls`.
inline Tensor compute_heatmap(const Model& model, const Tensor& image, std::size_t cls, Method method,
                              const MethodOptions& opts = {}) {
  if (cls >= model.class_count) throw shape_error("class index out of range");
  switch (method) {
    case Method::agf:
      return explain(model, image, cls, opts.agf).heatmap;
    case Method::lrp:
      return detail::spatial_heatmap(lrp(model, forward(model, image), cls));
    case Method::clrp:
      return detail::spatial_heatmap(clrp(model, forward(model, image), cls));
    case Method::gradcam: {
      const ForwardTrace trace = forward(model, image);
      Tensor seed(trace.logits.shape(), 0.0);
      seed[cls] = 1.0;
      const GradientTrace grads = backward(model, trace, seed);
      const std::size_t n = opts.gradcam_layer.value_or(default_gradcam_layer(model));
      const Tensor cam = grad_cam(trace, grads, n);
      return resize_bilinear(cam, image.shape()[1], image.shape()[2]);
    }
    case Method::random: {
      std::mt19937_64 rng(detail::fnv1a(image, 1469598103934665603ULL ^ opts.seed) + cls);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Tensor hm({image.shape()[1], image.shape()[2]});
      for (double& v : hm.values()) v = u(rng);
      return hm;
    }
  }
  throw data_error("unhandled method");
}

}  // namespace agf
