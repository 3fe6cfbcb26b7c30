#pragma once

#include <utility>

#include "agf/core.hpp"

namespace agf {

/// Per-channel class means of the data matrix H (C × HW) over the pixels the
/// partition map assigns to the foreground (φ > 0) and background (φ ≤ 0).
struct Representatives {
  Tensor foreground;  // R_f, length C
  Tensor background;  // R_b, length C
};

/// Spatial mixing weights of the two-class factorization H ≈ [R_b R_f]·W.
struct MixingWeights {
  Tensor background;  // W_b, length HW
  Tensor foreground;  // W_f, length HW
  double ridge = 0.0;
};

struct FactorizationResult {
  Representatives representatives;
  MixingWeights weights;  // after clipping to the non-negative orthant
  Tensor signed_map;      // W_f - W_b, H×W
};

/// An empty partition yields an all-zero representative.
inline Representatives representatives(const Tensor& data, const Tensor& phi) {
  if (data.rank() != 2) throw shape_error("representatives expects a C×HW data matrix");
  const std::size_t channels = data.shape()[0], pixels = data.shape()[1];
  if (phi.size() != pixels)
    throw shape_error("partition map has " + std::to_string(phi.size()) + " entries for " +
                      std::to_string(pixels) + " pixels");

  Representatives rep{Tensor({channels}, 0.0), Tensor({channels}, 0.0)};
  std::size_t n_fg = 0;
  for (std::size_t p = 0; p < pixels; ++p) n_fg += phi[p] > 0.0 ? 1 : 0;
  const std::size_t n_bg = pixels - n_fg;
  for (std::size_t c = 0; c < channels; ++c) {
    double fg = 0.0, bg = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) (phi[p] > 0.0 ? fg : bg) += data[c * pixels + p];
    rep.foreground[c] = n_fg ? fg / static_cast<double>(n_fg) : 0.0;
    rep.background[c] = n_bg ? bg / static_cast<double>(n_bg) : 0.0;
  }
  return rep;
}

/// Least-squares weights before clipping: the solution of
/// (RᵀR + λI) W = RᵀH with R = [R_b R_f] and λ = 1e-6 · trace(RᵀR) / 2.
/// An all-zero R gives zero weights.
inline MixingWeights solve_weights_unclipped(const Representatives& rep, const Tensor& data) {
  if (data.rank() != 2) throw shape_error("solve_weights expects a C×HW data matrix");
  const std::size_t channels = data.shape()[0], pixels = data.shape()[1];
  if (rep.foreground.size() != channels || rep.background.size() != channels)
    throw shape_error("representatives do not match the data channel count");

  const Tensor& rb = rep.background;
  const Tensor& rf = rep.foreground;
  double gbb = 0.0, gbf = 0.0, gff = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    gbb += rb[c] * rb[c];
    gbf += rb[c] * rf[c];
    gff += rf[c] * rf[c];
  }

  MixingWeights w{Tensor({pixels}, 0.0), Tensor({pixels}, 0.0), 0.0};
  const double trace = gbb + gff;
  if (trace == 0.0) return w;
  w.ridge = 1e-6 * trace / 2.0;
  const double a = gbb + w.ridge, d = gff + w.ridge, b = gbf;
  // Gram matrices are PSD, so det >= λ·trace + λ² > 0.
  const double det = a * d - b * b;
  for (std::size_t p = 0; p < pixels; ++p) {
    double hb = 0.0, hf = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      hb += rb[c] * data[c * pixels + p];
      hf += rf[c] * data[c * pixels + p];
    }
    w.background[p] = (d * hb - b * hf) / det;
    w.foreground[p] = (a * hf - b * hb) / det;
  }
  return w;
}

inline MixingWeights solve_weights(const Representatives& rep, const Tensor& data) {
  MixingWeights w = solve_weights_unclipped(rep, data);
  w.background = positive_part(w.background);
  w.foreground = positive_part(w.foreground);
  return w;
}

/// Two-class factorization of a C×H×W tensor guided by the sign of an H×W
/// partition map. The tensor is max-normalized and squashed through a
/// sigmoid before the class means are taken.
inline FactorizationResult factorize(const Tensor& y, const Tensor& phi) {
  if (y.rank() != 3) throw shape_error("factorize expects a C×H×W tensor, got " + to_string(y.shape()));
  if (phi.rank() != 2 || phi.shape()[0] != y.shape()[1] || phi.shape()[1] != y.shape()[2])
    throw shape_error("partition map " + to_string(phi.shape()) + " does not match " + to_string(y.shape()));

  const std::size_t h = y.shape()[1], w = y.shape()[2];
  const Tensor data = heaviside_surrogate(normalize_max(y)).reshaped({y.shape()[0], h * w});
  FactorizationResult out;
  out.representatives = representatives(data, phi);
  out.weights = solve_weights(out.representatives, data);
  out.signed_map = subtract(out.weights.foreground, out.weights.background).reshaped({h, w});
  return out;
}

/// F̄(Y, φ) with φ taken as the channel mean of the C×H×W guide.
inline Tensor guided_factorization(const Tensor& y, const Tensor& guide) {
  require_same_shape(y, guide, "guided_factorization");
  return factorize(y, channel_mean_reduce(guide)).signed_map;
}

}  // namespace agf
