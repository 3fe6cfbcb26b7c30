#pragma once

#include <type_traits>
#include <variant>
#include <vector>

#include "agf/core.hpp"
#include "agf/model.hpp"

namespace agf {

/// ∂L/∂x for the input of every layer, in execution order (parallel to
/// ForwardTrace::inputs), where L = seed · logits.
struct GradientTrace {
  std::vector<Tensor> grads;

  const Tensor& grad_at(std::size_t n) const {
    if (n < 1 || n > grads.size()) throw shape_error("layer index out of range");
    return grads[grads.size() - n];
  }
};

/// Gradient of the layer's input given the gradient of its output.
inline Tensor backward_layer(const Layer& layer, const Tensor& x, const Tensor& g_out) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2d>) {
          return conv2d_transpose(g_out, l.weight, x.shape(), l.stride, l.padding);
        } else if constexpr (std::is_same_v<T, Linear>) {
          return linear_transpose(g_out, l.weight);
        } else if constexpr (std::is_same_v<T, Relu>) {
          Tensor g = g_out;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (!(x[i] > 0.0)) g[i] = 0.0;
          return g;
        } else if constexpr (std::is_same_v<T, MaxPool2d>) {
          return maxpool2d_route(x, g_out, l.kernel, l.stride);
        } else if constexpr (std::is_same_v<T, AvgPool2d>) {
          return avgpool2d_transpose(g_out, x.shape(), l.kernel, l.stride);
        } else {
          return g_out.reshaped(x.shape());
        }
      },
      layer);
}

inline GradientTrace backward(const Model& model, const ForwardTrace& trace, const Tensor& seed) {
  if (trace.inputs.size() != model.layers.size())
    throw shape_error("trace has " + std::to_string(trace.inputs.size()) + " cached inputs for a " +
                      std::to_string(model.layers.size()) + "-layer model");
  if (seed.shape() != Shape{model.class_count})
    throw shape_error("seed must have one entry per class, got " + to_string(seed.shape()));
  if (trace.logits.shape() != seed.shape()) throw shape_error("trace logits do not match the model");

  const auto shapes = model.shapes();
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    if (trace.inputs[k].shape() != shapes[k])
      throw shape_error("trace input " + std::to_string(k) + " has shape " + to_string(trace.inputs[k].shape()) +
                        ", model expects " + to_string(shapes[k]));
  }

  GradientTrace out;
  out.grads.resize(model.layers.size());
  Tensor g = seed;
  for (std::size_t k = model.layers.size(); k-- > 0;) {
    g = backward_layer(model.layers[k], trace.inputs[k], g);
    out.grads[k] = g;
  }
  return out;
}

}  // namespace agf
