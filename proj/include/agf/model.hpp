#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "agf/core.hpp"

namespace agf {

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2d {
  Tensor weight;  // out × in × kh × kw
  Tensor bias;    // out
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t kernel_h() const { return weight.shape()[2]; }
  std::size_t kernel_w() const { return weight.shape()[3]; }
};

struct Linear {
  Tensor weight;  // out × in
  Tensor bias;    // out

  std::size_t out_features() const { return weight.shape()[0]; }
  std::size_t in_features() const { return weight.shape()[1]; }
};

struct Relu {};

struct MaxPool2d {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct AvgPool2d {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct Flatten {};

using Layer = std::variant<Conv2d, Linear, Relu, MaxPool2d, AvgPool2d, Flatten>;

inline const char* kind_name(const Layer& layer) {
  constexpr const char* names[] = {"conv2d", "linear", "relu", "maxpool2d", "avgpool2d", "flatten"};
  return names[layer.index()];
}

inline bool is_parametric(const Layer& layer) {
  return std::holds_alternative<Conv2d>(layer) || std::holds_alternative<Linear>(layer);
}

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

/// Output shape of `layer` for an input of shape `in`; throws shape_error when
/// the layer cannot consume that shape.
inline Shape output_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2d>) {
          if (in.size() != 3 || in[0] != l.in_channels()) {
            throw shape_error("conv2d expects " + std::to_string(l.in_channels()) +
                              "×H×W input, got " + to_string(in));
          }
          const auto h = detail::conv_out_dim(in[1], l.kernel_h(), l.stride, l.padding);
          const auto w = detail::conv_out_dim(in[2], l.kernel_w(), l.stride, l.padding);
          if (h == 0 || w == 0) throw shape_error("conv2d kernel larger than padded input " + to_string(in));
          return {l.out_channels(), h, w};
        } else if constexpr (std::is_same_v<T, Linear>) {
          if (in.size() != 1 || in[0] != l.in_features()) {
            throw shape_error("linear expects a vector of " + std::to_string(l.in_features()) +
                              ", got " + to_string(in));
          }
          return {l.out_features()};
        } else if constexpr (std::is_same_v<T, Relu>) {
          return in;
        } else if constexpr (std::is_same_v<T, MaxPool2d> || std::is_same_v<T, AvgPool2d>) {
          if (in.size() != 3) throw shape_error("pooling expects C×H×W input, got " + to_string(in));
          const auto h = detail::conv_out_dim(in[1], l.kernel, l.stride, 0);
          const auto w = detail::conv_out_dim(in[2], l.kernel, l.stride, 0);
          if (h == 0 || w == 0) throw shape_error("pool window larger than input " + to_string(in));
          return {in[0], h, w};
        } else {
          return {volume(in)};
        }
      },
      layer);
}

// ---------------------------------------------------------------------------
// Kernels
//
// The transposed kernels compute Wᵀ·g for the linear map the forward kernel
// applies (without bias). Backprop and every relevance rule use them.
// ---------------------------------------------------------------------------

namespace detail {

/// Output positions [lo, hi) whose tap at kernel offset `k` lands inside an
/// input axis of length `in`.
inline std::pair<std::size_t, std::size_t> valid_taps(std::size_t out, std::size_t in, std::size_t k,
                                                      std::size_t stride, std::size_t pad) {
  // need 0 <= p*stride + k - pad < in
  const std::size_t lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  if (in + pad <= k) return {0, 0};
  const std::size_t hi = std::min(out, (in + pad - k - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `bias` may be null.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t stride,
                     std::size_t padding) {
  const std::size_t oc = weight.shape()[0], ic = weight.shape()[1];
  const std::size_t kh = weight.shape()[2], kw = weight.shape()[3];
  const std::size_t ih = x.shape()[1], iw = x.shape()[2];
  const std::size_t oh = detail::conv_out_dim(ih, kh, stride, padding);
  const std::size_t ow = detail::conv_out_dim(iw, kw, stride, padding);
  Tensor y({oc, oh, ow});
  const double* xp = x.data().data();
  const double* wp = weight.data().data();
  double* yp = y.values().data();
  for (std::size_t o = 0; o < oc; ++o) {
    double* yo = yp + o * oh * ow;
    for (std::size_t i = 0; i < ic; ++i) {
      const double* xi = xp + i * ih * iw;
      for (std::size_t u = 0; u < kh; ++u) {
        const auto [r0, r1] = detail::valid_taps(oh, ih, u, stride, padding);
        for (std::size_t v = 0; v < kw; ++v) {
          const auto [c0, c1] = detail::valid_taps(ow, iw, v, stride, padding);
          const double wv = wp[((o * ic + i) * kh + u) * kw + v];
          for (std::size_t r = r0; r < r1; ++r) {
            const double* xrow = xi + (r * stride + u - padding) * iw;
            double* yrow = yo + r * ow;
            for (std::size_t c = c0; c < c1; ++c) yrow[c] += wv * xrow[c * stride + v - padding];
          }
        }
      }
    }
    if (bias)
      for (std::size_t p = 0; p < oh * ow; ++p) yo[p] += (*bias)[o];
  }
  return y;
}

inline Tensor conv2d_transpose(const Tensor& g, const Tensor& weight, const Shape& in_shape,
                               std::size_t stride, std::size_t padding) {
  const std::size_t oc = weight.shape()[0], ic = weight.shape()[1];
  const std::size_t kh = weight.shape()[2], kw = weight.shape()[3];
  const std::size_t ih = in_shape[1], iw = in_shape[2];
  const std::size_t oh = g.shape()[1], ow = g.shape()[2];
  Tensor out(in_shape);
  const double* gp = g.data().data();
  const double* wp = weight.data().data();
  double* op = out.values().data();
  for (std::size_t o = 0; o < oc; ++o) {
    const double* go = gp + o * oh * ow;
    for (std::size_t i = 0; i < ic; ++i) {
      double* oi = op + i * ih * iw;
      for (std::size_t u = 0; u < kh; ++u) {
        const auto [r0, r1] = detail::valid_taps(oh, ih, u, stride, padding);
        for (std::size_t v = 0; v < kw; ++v) {
          const auto [c0, c1] = detail::valid_taps(ow, iw, v, stride, padding);
          const double wv = wp[((o * ic + i) * kh + u) * kw + v];
          for (std::size_t r = r0; r < r1; ++r) {
            double* orow = oi + (r * stride + u - padding) * iw;
            const double* grow = go + r * ow;
            for (std::size_t c = c0; c < c1; ++c) orow[c * stride + v - padding] += wv * grow[c];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  const std::size_t out = weight.shape()[0], in = weight.shape()[1];
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += weight[o * in + i] * x[i];
    y[o] = acc + (bias ? (*bias)[o] : 0.0);
  }
  return y;
}

inline Tensor linear_transpose(const Tensor& g, const Tensor& weight) {
  const std::size_t out = weight.shape()[0], in = weight.shape()[1];
  Tensor x({in});
  for (std::size_t o = 0; o < out; ++o) {
    const double gv = g[o];
    if (gv == 0.0) continue;
    for (std::size_t i = 0; i < in; ++i) x[i] += weight[o * in + i] * gv;
  }
  return x;
}

/// Flat input index of the maximum in each pooling window, in output order.
/// Ties go to the first element in row-major window order.
inline std::vector<std::size_t> maxpool_argmax(const Tensor& x, std::size_t kernel, std::size_t stride) {
  const std::size_t ch = x.shape()[0], ih = x.shape()[1], iw = x.shape()[2];
  const std::size_t oh = detail::conv_out_dim(ih, kernel, stride, 0);
  const std::size_t ow = detail::conv_out_dim(iw, kernel, stride, 0);
  std::vector<std::size_t> idx;
  idx.reserve(ch * oh * ow);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t q = 0; q < ow; ++q) {
        std::size_t best = (c * ih + r * stride) * iw + q * stride;
        for (std::size_t u = 0; u < kernel; ++u) {
          for (std::size_t v = 0; v < kernel; ++v) {
            const std::size_t j = (c * ih + r * stride + u) * iw + q * stride + v;
            if (x[j] > x[best]) best = j;
          }
        }
        idx.push_back(best);
      }
    }
  }
  return idx;
}

inline Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  const std::size_t oh = detail::conv_out_dim(x.shape()[1], kernel, stride, 0);
  const std::size_t ow = detail::conv_out_dim(x.shape()[2], kernel, stride, 0);
  Tensor y({x.shape()[0], oh, ow});
  const auto idx = maxpool_argmax(x, kernel, stride);
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = x[idx[i]];
  return y;
}

/// Routes each output value to the argmax of its window.
inline Tensor maxpool2d_route(const Tensor& x, const Tensor& g, std::size_t kernel, std::size_t stride) {
  Tensor out(x.shape());
  const auto idx = maxpool_argmax(x, kernel, stride);
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += g[i];
  return out;
}

inline Tensor avgpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  const std::size_t ch = x.shape()[0], ih = x.shape()[1], iw = x.shape()[2];
  const std::size_t oh = detail::conv_out_dim(ih, kernel, stride, 0);
  const std::size_t ow = detail::conv_out_dim(iw, kernel, stride, 0);
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  Tensor y({ch, oh, ow});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) {
        double acc = 0.0;
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) acc += x.at(c, r * stride + u, q * stride + v);
        y.at(c, r, q) = acc * inv;
      }
  return y;
}

inline Tensor avgpool2d_transpose(const Tensor& g, const Shape& in_shape, std::size_t kernel,
                                  std::size_t stride) {
  Tensor out(in_shape);
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  for (std::size_t c = 0; c < g.shape()[0]; ++c)
    for (std::size_t r = 0; r < g.shape()[1]; ++r)
      for (std::size_t q = 0; q < g.shape()[2]; ++q) {
        const double share = g.at(c, r, q) * inv;
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) out.at(c, r * stride + u, q * stride + v) += share;
      }
  return out;
}

/// Applies one layer (including bias) to `x`.
inline Tensor apply_layer(const Layer& layer, const Tensor& x) {
  return std::visit(
      [&](const auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv2d>) {
          return conv2d(x, l.weight, &l.bias, l.stride, l.padding);
        } else if constexpr (std::is_same_v<T, Linear>) {
          return linear(x, l.weight, &l.bias);
        } else if constexpr (std::is_same_v<T, Relu>) {
          return positive_part(x);
        } else if constexpr (std::is_same_v<T, MaxPool2d>) {
          return maxpool2d(x, l.kernel, l.stride);
        } else if constexpr (std::is_same_v<T, AvgPool2d>) {
          return avgpool2d(x, l.kernel, l.stride);
        } else {
          return x.reshaped({x.size()});
        }
      },
      layer);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Preprocessing {
  // Per input channel (first axis); both empty means identity.
  std::vector<double> mean;
  std::vector<double> std;

  bool is_identity() const { return mean.empty() && std.empty(); }
};

/// A strictly sequential network. Layers are stored in execution order: the
/// first layer consumes the (preprocessed) image, the last produces logits.
///
/// The attribution literature numbers layers the other way round, with layer
/// N consuming the input and layer 1 producing the output. `paper_index` and
/// `execution_index` convert between the two: for a model with N layers,
/// execution position k (0-based) is layer n = N - k.
struct Model {
  std::vector<Layer> layers;
  std::size_t class_count = 0;
  Shape input_shape;
  Preprocessing preprocessing;

  std::size_t depth() const { return layers.size(); }

  std::size_t paper_index(std::size_t exec) const {
    if (exec >= layers.size()) throw shape_error("execution index out of range");
    return layers.size() - exec;
  }

  std::size_t execution_index(std::size_t n) const {
    if (n < 1 || n > layers.size()) {
      throw shape_error("layer index " + std::to_string(n) + " outside [1, " +
                        std::to_string(layers.size()) + "]");
    }
    return layers.size() - n;
  }

  const Layer& layer(std::size_t n) const { return layers[execution_index(n)]; }

  /// Input shape of every layer in execution order, plus the output shape last.
  std::vector<Shape> shapes() const {
    std::vector<Shape> out{input_shape};
    for (const auto& l : layers) out.push_back(output_shape(l, out.back()));
    return out;
  }

  /// Throws shape_error if the declared layers do not compose or do not end in
  /// a class_count-long vector.
  void validate() const {
    if (layers.empty()) throw shape_error("model has no layers");
    if (input_shape.empty()) throw shape_error("model has no input shape");
    for (auto d : input_shape)
      if (d == 0) throw shape_error("model input shape has a zero dimension");
    for (const auto& l : layers) {
      if (const auto* c = std::get_if<Conv2d>(&l)) {
        if (c->weight.rank() != 4 || c->bias.shape() != Shape{c->out_channels()})
          throw shape_error("conv2d weight/bias shapes inconsistent");
        if (c->stride < 1) throw shape_error("conv2d stride must be >= 1");
      } else if (const auto* f = std::get_if<Linear>(&l)) {
        if (f->weight.rank() != 2 || f->bias.shape() != Shape{f->out_features()})
          throw shape_error("linear weight/bias shapes inconsistent");
      } else if (const auto* m = std::get_if<MaxPool2d>(&l)) {
        if (m->stride < 1 || m->kernel < 1) throw shape_error("maxpool2d kernel/stride must be >= 1");
      } else if (const auto* a = std::get_if<AvgPool2d>(&l)) {
        if (a->stride < 1 || a->kernel < 1) throw shape_error("avgpool2d kernel/stride must be >= 1");
      }
    }
    const auto s = shapes();
    if (s.back() != Shape{class_count}) {
      throw shape_error("final layer produces " + to_string(s.back()) + ", expected [" +
                        std::to_string(class_count) + "]");
    }
    if (!preprocessing.is_identity()) {
      if (preprocessing.mean.size() != input_shape[0] || preprocessing.std.size() != input_shape[0])
        throw shape_error("preprocessing arrays must have one entry per input channel");
      for (double v : preprocessing.std)
        if (!(v > 0.0)) throw shape_error("preprocessing std must be positive");
    }
  }
};

/// Cached state of one forward pass. `inputs[k]` is the input of the layer at
/// execution position k; `inputs[0]` is the preprocessed image.
struct ForwardTrace {
  std::vector<Tensor> inputs;
  Tensor logits;

  /// Input x⁽ⁿ⁾ of layer n in reverse (output-first) numbering.
  const Tensor& input_at(std::size_t n) const {
    if (n < 1 || n > inputs.size()) throw shape_error("layer index out of range");
    return inputs[inputs.size() - n];
  }
};

inline Tensor preprocess(const Model& model, const Tensor& image) {
  if (image.shape() != model.input_shape) {
    throw shape_error("image shape " + to_string(image.shape()) + " does not match model input " +
                      to_string(model.input_shape));
  }
  if (model.preprocessing.is_identity()) return image;
  Tensor x = image;
  const std::size_t channels = image.shape()[0];
  const std::size_t per = image.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const double m = model.preprocessing.mean[c], s = model.preprocessing.std[c];
    for (std::size_t i = 0; i < per; ++i) x[c * per + i] = (x[c * per + i] - m) / s;
  }
  return x;
}

/// Runs `model` on an already-preprocessed input, caching every layer input.
inline ForwardTrace forward_preprocessed(const Model& model, Tensor x) {
  if (x.shape() != model.input_shape) {
    throw shape_error("input shape " + to_string(x.shape()) + " does not match model input " +
                      to_string(model.input_shape));
  }
  ForwardTrace trace;
  trace.inputs.reserve(model.layers.size());
  for (const auto& layer : model.layers) {
    trace.inputs.push_back(x);
    x = apply_layer(layer, trace.inputs.back());
  }
  trace.logits = std::move(x);
  return trace;
}

inline ForwardTrace forward(const Model& model, const Tensor& image) {
  return forward_preprocessed(model, preprocess(model, image));
}

inline std::size_t argmax(const Tensor& v) {
  return static_cast<std::size_t>(std::max_element(v.values().begin(), v.values().end()) -
                                  v.values().begin());
}

}  // namespace agf
