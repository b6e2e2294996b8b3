#pragma once
// Minimal dense tensor: binary64 storage, row-major, immutable-by-convention.
// Low precision never lives in a Tensor; it enters only through quantize()
// applied at configured points.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscale/float_format.hpp"
#include "unitscale/random.hpp"

namespace unitscale {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("shape dims must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw std::invalid_argument("data length does not match shape");
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }

  double operator[](std::int64_t i) const { return data_[i]; }
  double& operator[](std::int64_t i) { return data_[i]; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double value() const {
    if (numel() != 1) throw std::logic_error("value(): tensor is not a scalar");
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw std::invalid_argument("reshape changes element count");
    return Tensor(std::move(s), data_);
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

// ---------------------------------------------------------------------------
// Construction

inline Tensor randn(Shape shape, double sigma, std::uint64_t seed) {
  if (sigma <= 0) throw std::invalid_argument("randn: sigma must be positive");
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = sigma * rng.normal();
  return t;
}

inline Tensor full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

inline Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

inline Tensor identity_matrix(std::int64_t n) {
  Tensor t({n, n});
  for (std::int64_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Statistics

struct ScaleStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::int64_t n = 0;
};

inline ScaleStats stats(const Tensor& t) {
  if (t.numel() == 0) throw std::invalid_argument("stats: empty tensor");
  double mean = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) mean += t[i];
  mean /= static_cast<double>(t.numel());
  double var = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double d = t[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(t.numel());
  return {mean, std::sqrt(var), t.numel()};
}

// ---------------------------------------------------------------------------
// Exponent histogram (per power of two, FP16-aligned bins)

struct ExponentHistogram {
  // Octave bins [2^e, 2^(e+1)) for e in [min_octave, max_octave], preceded by
  // one merged subnormal bin [2^-24, 2^-14). Magnitudes in (0, 2^-24) count
  // as underflow-to-zero; magnitudes >= 2^16 and non-finite values share the
  // overflow bin; exact zeros are counted separately.
  static constexpr int min_octave = -14;
  static constexpr int max_octave = 15;
  static constexpr int num_octaves = max_octave - min_octave + 1;

  std::int64_t zero_count = 0;
  std::int64_t underflow_count = 0;
  std::int64_t subnormal_count = 0;
  std::array<std::int64_t, num_octaves> octave{};
  std::int64_t overflow_count = 0;

  std::int64_t total() const {
    std::int64_t t = zero_count + underflow_count + subnormal_count + overflow_count;
    for (std::int64_t c : octave) t += c;
    return t;
  }
  std::int64_t octave_count(int e) const { return octave.at(e - min_octave); }
};

inline ExponentHistogram exponent_histogram(const Tensor& t) {
  ExponentHistogram h;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double a = std::fabs(t[i]);
    if (a == 0.0) {
      ++h.zero_count;
    } else if (!std::isfinite(a)) {
      ++h.overflow_count;
    } else {
      const int e = std::ilogb(a);
      if (e < -24)
        ++h.underflow_count;
      else if (e < -14)
        ++h.subnormal_count;
      else if (e > ExponentHistogram::max_octave)
        ++h.overflow_count;
      else
        ++h.octave[e - ExponentHistogram::min_octave];
    }
  }
  return h;
}

/// CSV export: `bin_lo,bin_hi,count` with sentinel rows for the zero,
/// underflow, subnormal and overflow/inf buckets.
inline std::string histogram_csv(const ExponentHistogram& h) {
  std::string out = "bin_lo,bin_hi,count\n";
  auto row = [&out](double lo, double hi, std::int64_t c) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%lld\n", lo, hi,
                  static_cast<long long>(c));
    out += buf;
  };
  row(0.0, 0.0, h.zero_count);
  row(0.0, std::ldexp(1.0, -24), h.underflow_count);
  row(std::ldexp(1.0, -24), std::ldexp(1.0, -14), h.subnormal_count);
  for (int e = ExponentHistogram::min_octave; e <= ExponentHistogram::max_octave; ++e)
    row(std::ldexp(1.0, e), std::ldexp(1.0, e + 1), h.octave_count(e));
  row(std::ldexp(1.0, 16), std::numeric_limits<double>::infinity(), h.overflow_count);
  return out;
}

/// Fraction of nonzero elements with magnitude inside [lo, hi].
inline double nonzero_mass_within(const Tensor& t, double lo, double hi) {
  std::int64_t nonzero = 0, inside = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double a = std::fabs(t[i]);
    if (a == 0.0) continue;
    ++nonzero;
    if (a >= lo && a <= hi) ++inside;
  }
  return nonzero == 0 ? 1.0 : static_cast<double>(inside) / static_cast<double>(nonzero);
}

// ---------------------------------------------------------------------------
// Elementwise ops and reductions

namespace detail {
inline Tensor map(const Tensor& t, double (*fn)(double)) {
  Tensor out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = fn(t[i]);
  return out;
}
}  // namespace detail

inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double gauss_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

inline double relu_fn(double x) { return x > 0.0 ? x : 0.0; }
inline double gelu_fn(double x) { return x * gauss_cdf(x); }
inline double sigmoid_fn(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double relu_grad_fn(double x) { return x > 0.0 ? 1.0 : 0.0; }
inline double gelu_grad_fn(double x) { return gauss_cdf(x) + x * gauss_pdf(x); }
inline double tanh_grad_fn(double x) {
  const double t = std::tanh(x);
  return 1.0 - t * t;
}
inline double sigmoid_grad_fn(double x) {
  const double s = sigmoid_fn(x);
  return s * (1.0 - s);
}

inline Tensor relu(const Tensor& t) { return detail::map(t, relu_fn); }
inline Tensor gelu(const Tensor& t) { return detail::map(t, gelu_fn); }
inline Tensor tanh(const Tensor& t) { return detail::map(t, [](double x) { return std::tanh(x); }); }
inline Tensor sigmoid(const Tensor& t) { return detail::map(t, sigmoid_fn); }

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor scale(const Tensor& t, double c) {
  Tensor out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = c * t[i];
  return out;
}

inline Tensor sum(const Tensor& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i];
  return Tensor::scalar(s);
}

inline Tensor quantize(const Tensor& t, const FloatFormat& f) {
  Tensor out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = quantize(t[i], f);
  return out;
}

/// Softmax over the last axis (numerically stabilised).
inline Tensor softmax_lastaxis(const Tensor& t) {
  if (t.rank() == 0) throw std::invalid_argument("softmax: rank-0 tensor");
  const std::int64_t s = t.shape().back();
  const std::int64_t rows = t.numel() / s;
  Tensor out(t.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = t.data().data() + r * s;
    double* o = out.data().data() + r * s;
    double mx = in[0];
    for (std::int64_t i = 1; i < s; ++i) mx = std::max(mx, in[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < s; ++i) {
      o[i] = std::exp(in[i] - mx);
      z += o[i];
    }
    for (std::int64_t i = 0; i < s; ++i) o[i] /= z;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)

using EigenMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                Eigen::Dynamic, Eigen::RowMajor>>;
using EigenMutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// a[b x m] * w[m x n] -> [b x n]
inline Tensor matmul(const Tensor& a, const Tensor& w) {
  if (a.rank() != 2 || w.rank() != 2 || a.dim(1) != w.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " + shape_str(w.shape()));
  Tensor out({a.dim(0), w.dim(1)});
  EigenMap ma(a.data().data(), a.dim(0), a.dim(1));
  EigenMap mw(w.data().data(), w.dim(0), w.dim(1));
  EigenMutMap mo(out.data().data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mw;
  return out;
}

/// a[b x m]^T * g[b x n] -> [m x n]
inline Tensor matmul_transpose_a(const Tensor& a, const Tensor& g) {
  if (a.rank() != 2 || g.rank() != 2 || a.dim(0) != g.dim(0))
    throw std::invalid_argument("matmul_transpose_a: incompatible shapes");
  Tensor out({a.dim(1), g.dim(1)});
  EigenMap ma(a.data().data(), a.dim(0), a.dim(1));
  EigenMap mg(g.data().data(), g.dim(0), g.dim(1));
  EigenMutMap mo(out.data().data(), out.dim(0), out.dim(1));
  mo.noalias() = ma.transpose() * mg;
  return out;
}

/// g[b x n] * w[m x n]^T -> [b x m]
inline Tensor matmul_transpose_b(const Tensor& g, const Tensor& w) {
  if (g.rank() != 2 || w.rank() != 2 || g.dim(1) != w.dim(1))
    throw std::invalid_argument("matmul_transpose_b: incompatible shapes");
  Tensor out({g.dim(0), w.dim(0)});
  EigenMap mg(g.data().data(), g.dim(0), g.dim(1));
  EigenMap mw(w.data().data(), w.dim(0), w.dim(1));
  EigenMutMap mo(out.data().data(), out.dim(0), out.dim(1));
  mo.noalias() = mg * mw.transpose();
  return out;
}

inline bool all_finite(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

}  // namespace unitscale
