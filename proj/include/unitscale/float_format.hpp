#pragma once
// Emulation of low-precision floating-point formats on top of binary64.
//
// A format is described by its exponent/mantissa widths and usable exponent
// range rather than by bit tables, which is enough to reproduce the value
// grid of the IEEE-like 16/32-bit formats and the two families of FP8
// proposals. Values are kept in binary64 throughout; `quantize` rounds a
// reference value onto the format's grid (round-to-nearest, ties-to-even).

#include <cctype>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace unitscale {

enum class OverflowPolicy { saturate_to_max, to_infinity };

struct FloatFormat {
  std::string name;       // display name, e.g. "FP8 E4 (a)"
  std::string id;         // short token for CLIs/configs, e.g. "fp8e4a"
  int exponent_bits = 0;  // E
  int mantissa_bits = 0;  // M
  int bias_offset = 0;    // added to the IEEE bias 2^(E-1)-1
  int max_exponent = 0;   // largest usable exponent
  int min_exponent = 0;   // smallest normal exponent
  bool supports_subnormals = true;
  OverflowPolicy overflow = OverflowPolicy::saturate_to_max;
  // Largest representable magnitude. Defaults to the full top-exponent
  // mantissa (2 - 2^-M) * 2^max_exponent; the E4 formats cap it at 240,
  // reserving the higher code points for special values.
  double max_value = 0.0;

  FloatFormat with_overflow(OverflowPolicy p) const {
    FloatFormat f = *this;
    f.overflow = p;
    return f;
  }
};

inline double max_normal(const FloatFormat& f) { return f.max_value; }

inline double min_normal(const FloatFormat& f) {
  return std::ldexp(1.0, f.min_exponent);
}

inline double min_subnormal(const FloatFormat& f) {
  if (!f.supports_subnormals)
    throw std::domain_error("min_subnormal: " + f.name + " has no subnormals");
  return std::ldexp(1.0, f.min_exponent - f.mantissa_bits);
}

/// Round x to the nearest representable value of the format.
///
/// Ties go to the even mantissa. Values past the overflow boundary
/// (max_value + half an ulp) follow the format's overflow policy. Signed
/// zeros and non-finite inputs pass through unchanged, so overflow produced
/// upstream stays visible.
inline double quantize(double x, const FloatFormat& f) {
  if (x == 0.0 || !std::isfinite(x)) return x;
  const double sign = x < 0.0 ? -1.0 : 1.0;
  const double a = std::fabs(x);
  const int m = f.mantissa_bits;

  const int top_exp = std::ilogb(f.max_value);
  const double ulp_top = std::ldexp(1.0, top_exp - m);
  if (a >= f.max_value + 0.5 * ulp_top) {
    return f.overflow == OverflowPolicy::to_infinity
               ? sign * std::numeric_limits<double>::infinity()
               : sign * f.max_value;
  }

  const double lo_normal = min_normal(f);
  if (a < lo_normal) {
    if (f.supports_subnormals) {
      const double step = std::ldexp(1.0, f.min_exponent - m);
      return sign * std::rint(a / step) * step;
    }
    // Nearest of {0, min_normal}; the midpoint goes to 0 (even mantissa).
    return a <= 0.5 * lo_normal ? sign * 0.0 : sign * lo_normal;
  }

  const int e = std::ilogb(a);
  const double step = std::ldexp(1.0, e - m);
  double q = std::rint(a / step) * step;
  if (q > f.max_value) q = f.max_value;  // capped formats (E4 (b))
  return sign * q;
}

/// The eight formats of the catalog, in table order.
inline const std::vector<FloatFormat>& format_catalog() {
  static const std::vector<FloatFormat> catalog = [] {
    auto make = [](std::string name, std::string id, int e, int m, int bias_off,
                   int max_exp, int min_exp, double max_val = 0.0) {
      FloatFormat f;
      f.name = std::move(name);
      f.id = std::move(id);
      f.exponent_bits = e;
      f.mantissa_bits = m;
      f.bias_offset = bias_off;
      f.max_exponent = max_exp;
      f.min_exponent = min_exp;
      f.max_value = max_val != 0.0
                        ? max_val
                        : (2.0 - std::ldexp(1.0, -m)) * std::ldexp(1.0, max_exp);
      return f;
    };
    std::vector<FloatFormat> v;
    v.push_back(make("FP32", "fp32", 8, 23, 0, 127, -126));
    v.push_back(make("TF32", "tf32", 8, 10, 0, 127, -126));
    v.push_back(make("BFLOAT16", "bfloat16", 8, 7, 0, 127, -126));
    v.push_back(make("FP16", "fp16", 5, 10, 0, 15, -14));
    v.push_back(make("FP8 E5 (a)", "fp8e5a", 5, 2, 1, 15, -15));
    v.push_back(make("FP8 E5 (b)", "fp8e5b", 5, 2, 0, 15, -14));
    v.push_back(make("FP8 E4 (a)", "fp8e4a", 4, 3, 1, 7, -7));
    // E4 (b) would reach 480 with a full top-exponent mantissa; both E4
    // variants are capped at 240, reserving the codes above it.
    v.push_back(make("FP8 E4 (b)", "fp8e4b", 4, 3, 0, 8, -6, 240.0));
    return v;
  }();
  return catalog;
}

/// Look up a catalog format by id or display name (case-insensitive id).
inline const FloatFormat& format_by_name(const std::string& name) {
  auto lower = [](std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(c));
    return s;
  };
  const std::string key = lower(name);
  for (const FloatFormat& f : format_catalog()) {
    if (f.id == key || f.name == name) return f;
  }
  std::string valid;
  for (const FloatFormat& f : format_catalog()) {
    if (!valid.empty()) valid += ", ";
    valid += f.id;
  }
  throw std::invalid_argument("unknown format '" + name + "' (valid: " + valid + ")");
}

/// All non-negative representable values of the format, ascending.
inline std::vector<double> representable_values(const FloatFormat& f) {
  std::vector<double> v;
  v.push_back(0.0);
  const int m = f.mantissa_bits;
  if (f.supports_subnormals) {
    const double step = std::ldexp(1.0, f.min_exponent - m);
    for (int k = 1; k < (1 << m); ++k) v.push_back(k * step);
  }
  for (int e = f.min_exponent; e <= f.max_exponent; ++e) {
    for (int k = 0; k < (1 << m); ++k) {
      const double val = std::ldexp(1.0 + std::ldexp(static_cast<double>(k), -m), e);
      if (val > f.max_value) return v;
      v.push_back(val);
    }
  }
  return v;
}

}  // namespace unitscale
