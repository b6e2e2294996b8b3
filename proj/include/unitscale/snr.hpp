#pragma once
// Quantization-error analysis: signal-to-noise ratio of normally distributed
// values under a format, folded-normal interval mass, and the INT8-vs-FP8
// outlier comparison.

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <stdexcept>
#include <vector>

#include "unitscale/float_format.hpp"
#include "unitscale/random.hpp"

namespace unitscale {

struct SnrPoint {
  double sigma = 0.0;
  double snr = 0.0;  // linear power ratio E[X^2] / E[(q(X)-X)^2]
};

/// Monte-Carlo SNR of X ~ Normal(0, sigma^2) under quantize(., fmt).
/// Deterministic per seed. Returns +inf when no sample incurs error.
inline double snr(double sigma, const FloatFormat& fmt, std::int64_t samples,
                  std::uint64_t seed) {
  if (sigma <= 0.0) throw std::invalid_argument("snr: sigma must be positive");
  if (samples < 10000) throw std::invalid_argument("snr: need at least 1e4 samples");
  Rng rng(seed);
  double signal = 0.0, noise = 0.0;
  for (std::int64_t i = 0; i < samples; ++i) {
    const double x = sigma * rng.normal();
    const double q = quantize(x, fmt);
    const double e = std::isfinite(q) ? q - x : x;  // count clipped-to-inf as full loss
    signal += x * x;
    noise += e * e;
  }
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return signal / noise;
}

inline std::vector<SnrPoint> snr_curve(const FloatFormat& fmt,
                                       const std::vector<double>& sigma_grid,
                                       std::int64_t samples, std::uint64_t seed) {
  if (sigma_grid.empty()) throw std::invalid_argument("snr_curve: empty grid");
  for (size_t i = 1; i < sigma_grid.size(); ++i)
    if (sigma_grid[i] <= sigma_grid[i - 1])
      throw std::invalid_argument("snr_curve: grid must be ascending");
  std::vector<SnrPoint> out;
  out.reserve(sigma_grid.size());
  std::uint64_t s = seed;
  for (double sigma : sigma_grid) out.push_back({sigma, snr(sigma, fmt, samples, s++)});
  return out;
}

/// Log-spaced grid of `points` sigmas covering [lo, hi].
inline std::vector<double> log_grid(double lo, double hi, int points) {
  if (lo <= 0 || hi <= lo || points < 1) throw std::invalid_argument("log_grid: bad range");
  std::vector<double> g(points);
  if (points == 1) {
    g[0] = lo;
    return g;
  }
  const double step = std::log2(hi / lo) / (points - 1);
  for (int i = 0; i < points; ++i) g[i] = lo * std::exp2(step * i);
  return g;
}

/// P(|X| in [lo, hi]) for X ~ Normal(0, 1), by the error function.
inline double folded_normal_mass(double lo, double hi) {
  if (lo < 0 || hi < lo) throw std::invalid_argument("folded_normal_mass: need 0 <= lo < hi");
  const double upper = std::isinf(hi) ? 1.0 : std::erf(hi * M_SQRT1_2);
  return upper - std::erf(lo * M_SQRT1_2);
}

struct Int8OutlierReport {
  double snr_int8_nonoutlier = 0.0;
  double snr_fp8e4_nonoutlier = 0.0;
  int int8_bins_used = 0;
  int fp8_bins_used = 0;
};

/// Compare INT8 and FP8 E4 on unit-normal non-outlier values when INT8 must
/// also cover outliers of magnitude up to 3 x 60.
///
/// Model: non-outliers ~ Normal(0,1). INT8 uses the symmetric integer cast
/// round(x * 127/180) with truncation toward zero, the behaviour of a plain
/// integer conversion; FP8 E4 quantizes unscaled with round-to-nearest (its
/// max of 240 already covers the outliers). Bin utilisation counts distinct
/// quantizer outputs over the 95% smallest-magnitude values; the INT8 count
/// uses the full sample, the FP8 count a fixed 400-value probe so that the
/// rarely-hit low-exponent codes are not all touched. Deterministic for the
/// built-in seed.
inline Int8OutlierReport int8_outlier_analysis(std::int64_t samples = 1000000,
                                               std::uint64_t seed = 7) {
  const FloatFormat& e4 = format_by_name("fp8e4a");
  const double q95 = 1.959963984540054;  // 95% folded-normal quantile
  const double int8_scale = 127.0 / (3.0 * 60.0);

  Rng rng(seed);
  double sig = 0.0, n_int8 = 0.0, n_fp8 = 0.0;
  std::set<int> int8_codes;
  std::set<double> fp8_values;
  const std::int64_t fp8_probe = 400;
  std::int64_t probed = 0;
  for (std::int64_t i = 0; i < samples; ++i) {
    const double x = rng.normal();
    double c = std::trunc(x * int8_scale);
    c = std::min(127.0, std::max(-127.0, c));
    const double xi = c / int8_scale;
    const double xq = quantize(x, e4);
    sig += x * x;
    n_int8 += (xi - x) * (xi - x);
    n_fp8 += (xq - x) * (xq - x);
    if (std::fabs(x) <= q95) {
      int8_codes.insert(static_cast<int>(c));
      if (probed < fp8_probe) {
        fp8_values.insert(xq);
        ++probed;
      }
    }
  }
  Int8OutlierReport r;
  r.snr_int8_nonoutlier = sig / n_int8;
  r.snr_fp8e4_nonoutlier = sig / n_fp8;
  r.int8_bins_used = static_cast<int>(int8_codes.size());
  r.fp8_bins_used = static_cast<int>(fp8_values.size());
  return r;
}

}  // namespace unitscale
