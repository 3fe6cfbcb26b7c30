#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace agf {

using Shape = std::vector<std::size_t>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or ranks.
class shape_error : public error {
 public:
  using error::error;
};

/// Input that makes an operation undefined (e.g. a residual with nowhere to go).
class degenerate_input_error : public error {
 public:
  using error::error;
};

/// Malformed or inconsistent external data (datasets, galleries, arguments).
class data_error : public error {
 public:
  using error::error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major array of doubles. Every tensor flowing through the
/// attribution streams (activations, gradients, relevance maps, logits) is one
/// of these.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(volume(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (volume(shape_) != data_.size()) {
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + agf::to_string(shape_));
    }
  }

  static Tensor vector(std::vector<double> data) {
    Shape s{data.size()};
    return Tensor(std::move(s), std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // C×H×W accessors; callers guarantee rank 3.
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  /// Same data under a new shape of equal volume.
  Tensor reshaped(Shape shape) const {
    if (volume(shape) != data_.size()) {
      throw shape_error("cannot reshape " + agf::to_string(shape_) + " to " +
                        agf::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor&) const = default;

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw shape_error("tensor dimensions must be positive: " + agf::to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Reductions and elementwise helpers
// ---------------------------------------------------------------------------

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

inline double max_value(const Tensor& a) {
  if (a.empty()) throw shape_error("max of empty tensor");
  return *std::max_element(a.values().begin(), a.values().end());
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(const Tensor& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](double v) { return std::isfinite(v); });
}

inline std::size_t count_nonzero(const Tensor& a) {
  return static_cast<std::size_t>(
      std::count_if(a.values().begin(), a.values().end(), [](double v) { return v != 0.0; }));
}

template <typename Fn>
Tensor map(const Tensor& a, Fn fn) {
  Tensor out = a;
  for (double& v : out.values()) v = fn(v);
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
}

/// Spatial maps (H×W) combine with C×H×W tensors by repeating across channels.
inline bool is_channel_broadcast(const Shape& big, const Shape& map) {
  return big.size() == 3 && map.size() == 2 && big[1] == map[0] && big[2] == map[1];
}

namespace detail {

template <typename Op>
Tensor binary(const Tensor& a, const Tensor& b, Op op, const char* what) {
  if (a.shape() == b.shape()) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  if (is_channel_broadcast(a.shape(), b.shape())) {
    Tensor out = a;
    const std::size_t plane = b.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(a[i], b[i % plane]);
    return out;
  }
  throw shape_error(std::string(what) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                    to_string(b.shape()));
}

}  // namespace detail

/// Elementwise product; an H×W right operand is repeated over the channels of
/// a C×H×W left operand.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::multiplies<>{}, "hadamard");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::plus<>{}, "add");
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::minus<>{}, "subtract");
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, std::divides<>{}, "divide");
}

inline Tensor scale(const Tensor& a, double k) {
  return map(a, [k](double v) { return v * k; });
}

inline Tensor abs(const Tensor& a) {
  return map(a, [](double v) { return std::abs(v); });
}

inline Tensor positive_part(const Tensor& a) {
  return map(a, [](double v) { return v > 0.0 ? v : 0.0; });
}

/// a / max(a). Returns zeros when the maximum is not positive.
inline Tensor normalize_max(const Tensor& a) {
  if (a.empty()) return a;
  const double m = max_value(a);
  if (!(m > 0.0)) return Tensor(a.shape(), 0.0);
  return map(a, [m](double v) { return v / m; });
}

inline double sigmoid(double v) {
  // Split on sign so exp never overflows.
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

/// Smooth step used as a differentiable stand-in for the Heaviside function.
inline Tensor heaviside_surrogate(const Tensor& y) { return map(y, sigmoid); }

inline Tensor channel_sum_reduce(const Tensor& a) {
  if (a.rank() != 3) {
    throw shape_error("channel reduction expects a C×H×W tensor, got " + to_string(a.shape()));
  }
  const std::size_t c = a.shape()[0], plane = a.shape()[1] * a.shape()[2];
  Tensor out({a.shape()[1], a.shape()[2]});
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += a[k * plane + p];
    out[p] = s;
  }
  return out;
}

inline Tensor channel_mean_reduce(const Tensor& a) {
  Tensor out = channel_sum_reduce(a);
  const double c = static_cast<double>(a.shape()[0]);
  for (double& v : out.values()) v /= c;
  return out;
}

/// Repeats an H×W map across `channels` to build a C×H×W tensor.
inline Tensor broadcast_channels(const Tensor& map2d, std::size_t channels) {
  if (map2d.rank() != 2) throw shape_error("broadcast_channels expects an H×W map");
  Tensor out({channels, map2d.shape()[0], map2d.shape()[1]});
  const std::size_t plane = map2d.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = map2d[i % plane];
  return out;
}

/// |a - b| <= tol * max(|a|, |b|), with exact equality always accepted.
inline bool close_relative(double a, double b, double tol) {
  if (a == b) return true;
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

}  // namespace agf
