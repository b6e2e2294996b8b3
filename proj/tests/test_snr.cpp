#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unitscale/snr.hpp"

using namespace unitscale;

namespace {
constexpr std::int64_t kSamples = 100000;

double plateau_snr(const FloatFormat& f, std::uint64_t seed) {
  return snr(1.0, f, kSamples, seed);
}
}  // namespace

TEST_CASE("snr favors more mantissa bits") {
  const double s32 = plateau_snr(format_by_name("fp32"), 1);
  const double s16 = plateau_snr(format_by_name("fp16"), 1);
  const double s8 = plateau_snr(format_by_name("fp8e4a"), 1);
  CHECK(s32 > 100 * s16);
  CHECK(s16 > 100 * s8);
}

TEST_CASE("fp16 to fp8-e4 snr ratio tracks the mantissa difference") {
  // Relative rounding error scales as 2^-M, so the power ratio is about
  // 2^(2*(10-3)); the check allows a factor of two either way.
  const double s16 = snr(1.0, format_by_name("fp16"), 1000000, 5);
  const double s8 = snr(1.0, format_by_name("fp8e4a"), 1000000, 6);
  const double ratio = s16 / s8;
  CHECK(ratio > 16384.0 / 2);
  CHECK(ratio < 16384.0 * 2);
}

TEST_CASE("clipping kills snr far above the range") {
  // Saturation error approaches the signal itself, so the ratio collapses to
  // order 10^0, orders of magnitude below the plateau.
  const double s = snr(std::exp2(30), format_by_name("fp16"), kSamples, 2);
  CHECK(s < 2.0);
  CHECK(s < 1e-4 * snr(1.0, format_by_name("fp16"), kSamples, 2));
}

TEST_CASE("snr input validation") {
  CHECK_THROWS(snr(0.0, format_by_name("fp16"), kSamples, 0));
  CHECK_THROWS(snr(1.0, format_by_name("fp16"), 100, 0));
}

TEST_CASE("snr curve plateau properties") {
  for (const char* id : {"fp16", "fp8e5a", "fp8e4a"}) {
    const FloatFormat& f = format_by_name(id);
    CAPTURE(id);
    const double lo = min_normal(f) * 16.0;
    const double hi = max_normal(f) / 16.0;
    const auto curve = snr_curve(f, log_grid(lo, hi, 9), kSamples, 77);
    double peak = 0.0;
    for (const SnrPoint& p : curve) peak = std::max(peak, p.snr);
    for (const SnrPoint& p : curve) {
      CAPTURE(p.sigma);
      CHECK(p.snr > peak / 2.0);  // flat within 3 dB across the whole span
    }
  }
}

TEST_CASE("fp16 plateau is wider than fp8-e4 in log-sigma span") {
  auto span_octaves = [](const FloatFormat& f) {
    return std::log2(max_normal(f) / 16.0) - std::log2(min_normal(f) * 16.0);
  };
  CHECK(span_octaves(format_by_name("fp16")) >
        span_octaves(format_by_name("fp8e4a")));
  // And sigma = 1 sits inside the fp16 plateau.
  const double s1 = snr(1.0, format_by_name("fp16"), kSamples, 9);
  const double s2 = snr(2.0, format_by_name("fp16"), kSamples, 10);
  CHECK(std::fabs(std::log2(s1 / s2)) < std::log2(2.0));  // within 3 dB
}

TEST_CASE("doubling samples moves plateau points by little") {
  const FloatFormat& f = format_by_name("fp16");
  const double a = snr(1.0, f, 200000, 4);
  const double b = snr(1.0, f, 400000, 4);
  CHECK(std::fabs(a - b) / b < 0.05);
}

TEST_CASE("snr is deterministic per seed") {
  const FloatFormat& f = format_by_name("fp8e5b");
  CHECK(snr(1.0, f, kSamples, 11) == snr(1.0, f, kSamples, 11));
  CHECK(snr(1.0, f, kSamples, 11) != snr(1.0, f, kSamples, 12));
  // Changing the seed moves plateau values by well under 5%.
  const double a = snr(1.0, f, 1000000, 11), b = snr(1.0, f, 1000000, 12);
  CHECK(std::fabs(a - b) / b < 0.05);
}

TEST_CASE("folded normal mass") {
  CHECK(std::fabs(folded_normal_mass(1.0 / 16, 2.0) - 0.90) < 0.01);
  CHECK(folded_normal_mass(0.0, std::numeric_limits<double>::infinity()) ==
        Catch::Approx(1.0));
  CHECK(folded_normal_mass(0.0, 1.0) == Catch::Approx(0.6826894921370859).epsilon(1e-9));
  CHECK_THROWS(folded_normal_mass(-1.0, 1.0));
}

TEST_CASE("int8 outlier analysis reproduces the reference figures") {
  const Int8OutlierReport r = int8_outlier_analysis();
  CHECK(r.snr_int8_nonoutlier == Catch::Approx(2.03).margin(2.03 * 0.30));
  CHECK(r.snr_fp8e4_nonoutlier == Catch::Approx(1290.0).margin(1290.0 * 0.30));
  CHECK(r.snr_fp8e4_nonoutlier / r.snr_int8_nonoutlier > 100.0);
  CHECK(r.int8_bins_used == 3);
  CHECK(r.fp8_bins_used == 90);
}
