#pragma once

// Slow, loop-by-loop reference implementations used to check the library.
// Nothing here calls the kernels under test.

#include <cmath>
#include <cstddef>
#include <functional>
#include <ostream>
#include <random>
#include <vector>

#include "agf/all.hpp"

namespace oracle {

using agf::Shape;
using agf::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline double stab(double z, double eps) { return z + eps * (z >= 0.0 ? 1.0 : -1.0); }

inline double in_transform(double x, agf::InputTransform t) {
  switch (t) {
    case agf::InputTransform::absolute: return std::abs(x);
    case agf::InputTransform::positive: return std::max(0.0, x);
    case agf::InputTransform::ones: return 1.0;
    case agf::InputTransform::raw: return x;
  }
  return x;
}

inline double w_transform(double w, agf::WeightTransform t) {
  switch (t) {
    case agf::WeightTransform::absolute: return std::abs(w);
    case agf::WeightTransform::positive: return std::max(0.0, w);
    case agf::WeightTransform::raw: return w;
  }
  return w;
}

/// Direct convolution: every output cell sums its receptive field.
inline Tensor conv(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride, std::size_t pad) {
  const long C = long(x.shape()[0]), H = long(x.shape()[1]), W = long(x.shape()[2]);
  const long O = long(w.shape()[0]), KH = long(w.shape()[2]), KW = long(w.shape()[3]);
  const long s = long(stride), p = long(pad);
  const long OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor y({std::size_t(O), std::size_t(OH), std::size_t(OW)});
  for (long o = 0; o < O; ++o)
    for (long i = 0; i < OH; ++i)
      for (long j = 0; j < OW; ++j) {
        double acc = b ? (*b)[std::size_t(o)] : 0.0;
        for (long c = 0; c < C; ++c)
          for (long u = 0; u < KH; ++u)
            for (long v = 0; v < KW; ++v) {
              const long r = i * s + u - p, q = j * s + v - p;
              if (r < 0 || r >= H || q < 0 || q >= W) continue;
              acc += x.at(std::size_t(c), std::size_t(r), std::size_t(q)) *
                     w[std::size_t(((o * C + c) * KH + u) * KW + v)];
            }
        y.at(std::size_t(o), std::size_t(i), std::size_t(j)) = acc;
      }
  return y;
}

/// Generic relevance rule on a linear layer, written as the textbook double sum
///   R_i = Σ_j X_i Θ_ji r_j / stab(Σ_k X_k Θ_jk).
inline Tensor rule_linear(const Tensor& x, const Tensor& weight, const Tensor& r, agf::GenericRuleConfig cfg) {
  const std::size_t out = weight.shape()[0], in = weight.shape()[1];
  std::vector<double> z(out, 0.0);
  for (std::size_t j = 0; j < out; ++j)
    for (std::size_t i = 0; i < in; ++i)
      z[j] += in_transform(x[i], cfg.input) * w_transform(weight[j * in + i], cfg.weight);
  Tensor R({in}, 0.0);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j)
      R[i] += in_transform(x[i], cfg.input) * w_transform(weight[j * in + i], cfg.weight) * r[j] /
              stab(z[j], cfg.epsilon);
  return R;
}

/// Same rule on a convolution, enumerating every (output cell, tap) pair.
inline Tensor rule_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad, const Tensor& r,
                        agf::GenericRuleConfig cfg) {
  const long C = long(x.shape()[0]), H = long(x.shape()[1]), W = long(x.shape()[2]);
  const long O = long(w.shape()[0]), KH = long(w.shape()[2]), KW = long(w.shape()[3]);
  const long s = long(stride), p = long(pad);
  const long OH = long(r.shape()[1]), OW = long(r.shape()[2]);
  Tensor X = x;
  for (double& v : X.values()) v = in_transform(v, cfg.input);
  Tensor Wt = w;
  for (double& v : Wt.values()) v = w_transform(v, cfg.weight);
  const Tensor z = conv(X, Wt, nullptr, stride, pad);
  Tensor R(x.shape(), 0.0);
  for (long o = 0; o < O; ++o)
    for (long i = 0; i < OH; ++i)
      for (long j = 0; j < OW; ++j) {
        const double ratio = r.at(std::size_t(o), std::size_t(i), std::size_t(j)) /
                             stab(z.at(std::size_t(o), std::size_t(i), std::size_t(j)), cfg.epsilon);
        for (long c = 0; c < C; ++c)
          for (long u = 0; u < KH; ++u)
            for (long v = 0; v < KW; ++v) {
              const long rr = i * s + u - p, qq = j * s + v - p;
              if (rr < 0 || rr >= H || qq < 0 || qq >= W) continue;
              R.at(std::size_t(c), std::size_t(rr), std::size_t(qq)) +=
                  X.at(std::size_t(c), std::size_t(rr), std::size_t(qq)) *
                  Wt[std::size_t(((o * C + c) * KH + u) * KW + v)] * ratio;
            }
      }
  return R;
}

/// Grad-CAM with the channel weights kept in an explicit vector.
inline Tensor grad_cam(const Tensor& x, const Tensor& g) {
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  std::vector<double> alpha(C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) alpha[c] += g.at(c, h, w);
  Tensor cam({H, W}, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      double v = 0.0;
      for (std::size_t c = 0; c < C; ++c) v += alpha[c] * x.at(c, h, w) / double(C);
      cam[h * W + w] = v > 0.0 ? v : 0.0;
    }
  return cam;
}

/// ŷᵗ as a scalar function of the logits, with σ fixed by the caller.
inline double reweighted_target(const std::vector<double>& y, std::size_t t, double sigma) {
  std::vector<double> u(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = sigma > 0.0 ? (y[i] - y[t]) / sigma : 0.0;
    u[i] = y[t] * std::exp(-0.5 * d * d);
  }
  double denom = 0.0;
  for (double v : u) denom += std::exp(v - u[t]);
  return 1.0 / denom;
}

/// Sign pattern of every ReLU input and the winner of every max-pool window.
/// Two inputs with the same pattern sit on the same linear piece of the net.
inline std::vector<long> activation_pattern(const agf::Model& m, const agf::ForwardTrace& tr) {
  std::vector<long> pat;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const auto& x = tr.inputs[k];
    if (std::holds_alternative<agf::Relu>(m.layers[k])) {
      for (double v : x.values()) pat.push_back(v > 0.0);
    } else if (const auto* mp = std::get_if<agf::MaxPool2d>(&m.layers[k])) {
      for (auto a : agf::maxpool_argmax(x, mp->kernel, mp->stride)) pat.push_back(long(a));
    }
  }
  return pat;
}

/// Central-difference gradient of seed·logits with respect to the
/// preprocessed input. Coordinates whose ±h probes land on different linear
/// pieces are reported as NaN.
inline Tensor fd_input_gradient(const agf::Model& m, const Tensor& x0, const Tensor& seed, double h) {
  const auto base = activation_pattern(m, agf::forward_preprocessed(m, x0));
  auto score = [&](const Tensor& x, bool& same) {
    const auto tr = agf::forward_preprocessed(m, x);
    same = same && activation_pattern(m, tr) == base;
    double s = 0.0;
    for (std::size_t i = 0; i < seed.size(); ++i) s += seed[i] * tr.logits[i];
    return s;
  };
  Tensor g(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    Tensor xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    bool same = true;
    const double fp = score(xp, same), fm = score(xm, same);
    g[i] = same ? (fp - fm) / (2.0 * h) : std::nan("");
  }
  return g;
}

/// A small random conv net on a 2×8×8 input with 3 classes.
inline agf::Model random_tiny_model(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 1);
  agf::Model m;
  m.input_shape = {2, 8, 8};
  m.class_count = 3;
  const std::size_t c1 = 3 + std::size_t(coin(rng)), pad = std::size_t(coin(rng));
  m.layers.push_back(agf::Conv2d{random_tensor(rng, {c1, 2, 3, 3}), random_tensor(rng, {c1}, -0.2, 0.2), 1, pad});
  m.layers.push_back(agf::Relu{});
  if (coin(rng))
    m.layers.push_back(agf::MaxPool2d{2, 2});
  else
    m.layers.push_back(agf::AvgPool2d{2, 2});
  m.layers.push_back(agf::Conv2d{random_tensor(rng, {4, c1, 2, 2}), random_tensor(rng, {4}, -0.2, 0.2), 1, 0});
  m.layers.push_back(agf::Relu{});
  m.layers.push_back(agf::Flatten{});
  const std::size_t flat = m.shapes().back()[0];
  m.layers.push_back(agf::Linear{random_tensor(rng, {6, flat}), random_tensor(rng, {6}, -0.2, 0.2)});
  m.layers.push_back(agf::Relu{});
  m.layers.push_back(agf::Linear{random_tensor(rng, {3, 6}), random_tensor(rng, {3}, -0.2, 0.2)});
  m.validate();
  return m;
}

/// Pearson correlation of two equally sized tensors.
inline double pearson(const Tensor& a, const Tensor& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace oracle

namespace agf {

// Lets GoogleTest print tensors in failure messages.
inline void PrintTo(const Tensor& t, std::ostream* os) {
  *os << to_string(t.shape()) << " {";
  for (std::size_t i = 0; i < t.size() && i < 16; ++i) *os << (i ? ", " : "") << t[i];
  if (t.size() > 16) *os << ", ...";
  *os << "}";
}

}  // namespace agf
