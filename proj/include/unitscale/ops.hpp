#pragma once
// The scaled-ops compendium: closed-form unit-scaling factors per op, graph
// construction helpers that attach them, residual schemes with the identity
// rewrite, and the Monte-Carlo oracle used to validate the activation
// constants.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscale/graph.hpp"
#include "unitscale/random.hpp"
#include "unitscale/tensor.hpp"

namespace unitscale {

using graph::Builder;
using graph::NodeAttrs;
using graph::op_name;
using graph::OpKind;
using graph::ScaleFactors;

// Activation constants (4 significant figures; relu's alpha is closed-form).
inline constexpr double kReluBeta = M_SQRT2;
inline double relu_alpha() { return std::sqrt(2.0 / (1.0 - 1.0 / M_PI)); }
inline constexpr double kGeluAlpha = 1.701, kGeluBeta = 1.481;
inline constexpr double kTanhAlpha = 1.593, kTanhBeta = 1.467;
inline constexpr double kSigmoidAlpha = 4.802, kSigmoidBeta = 4.722;

/// Dimensions a factor formula may depend on.
struct OpDims {
  std::int64_t b = 0;  // batch rows
  std::int64_t m = 0;  // contraction size
  std::int64_t n = 0;  // output columns / sum length
  std::int64_t s = 0;  // softmax classes
  std::vector<double> gammas;
};

/// Unconstrained unit-scaling factors for an op at given dimensions.
inline ScaleFactors unit_factors(OpKind kind, const OpDims& d) {
  auto inv_sqrt = [](std::int64_t v) { return 1.0 / std::sqrt(static_cast<double>(v)); };
  switch (kind) {
    case OpKind::MatMul:
      if (d.b < 1 || d.m < 1 || d.n < 1) throw std::invalid_argument("matmul factors need b,m,n");
      return {inv_sqrt(d.m), {inv_sqrt(d.n), inv_sqrt(d.b)}};
    case OpKind::Sum:
      if (d.n < 1) throw std::invalid_argument("sum factors need n");
      return {inv_sqrt(d.n), {1.0}};
    case OpKind::WeightedAdd: {
      if (d.gammas.empty()) throw std::invalid_argument("weighted_add factors need gammas");
      double ss = 0.0;
      ScaleFactors f;
      for (double gm : d.gammas) {
        if (gm <= 0.0) throw std::invalid_argument("weighted_add: gammas must be positive");
        ss += gm * gm;
        f.betas.push_back(1.0 / gm);
      }
      if (ss == 0.0) throw std::invalid_argument("weighted_add: all-zero weights");
      f.alpha = 1.0 / std::sqrt(ss);
      return f;
    }
    case OpKind::Add:
      // Plain add of two unit-scale inputs: the gamma = (1, 1) weighted add.
      return {M_SQRT1_2, {1.0, 1.0}};
    case OpKind::Relu: return {relu_alpha(), {kReluBeta}};
    case OpKind::Gelu: return {kGeluAlpha, {kGeluBeta}};
    case OpKind::Tanh: return {kTanhAlpha, {kTanhBeta}};
    case OpKind::Sigmoid: return {kSigmoidAlpha, {kSigmoidBeta}};
    case OpKind::Softmax:
      if (d.s < 2) throw std::invalid_argument("softmax factors need s >= 2");
      return {static_cast<double>(d.s), {static_cast<double>(d.s)}};
    case OpKind::SoftmaxXent: {
      if (d.s < 2) throw std::invalid_argument("softmax_xent factors need s >= 2");
      const double s = static_cast<double>(d.s);
      return {1.0, {s / std::sqrt(s - 1.0), 1.0}};
    }
    case OpKind::LayerNorm:
      if (d.b < 1) throw std::invalid_argument("layer_norm factors need b");
      return {1.0, {1.0, inv_sqrt(d.b), inv_sqrt(d.b)}};
    case OpKind::Identity:
    case OpKind::Copy:
      return ScaleFactors::unit(1);
    case OpKind::Square:
      throw std::invalid_argument("square has no compendium entry");
  }
  throw std::logic_error("unit_factors: unhandled op");
}

struct CompendiumEntry {
  OpKind kind;
  std::string op;
  std::string factors;  // human-readable closed form
  std::function<ScaleFactors(const OpDims&)> eval;
};

/// One entry per op of the factor table.
inline const std::vector<CompendiumEntry>& compendium() {
  static const std::vector<CompendiumEntry> table = [] {
    auto entry = [](OpKind k, std::string text) {
      return CompendiumEntry{k, op_name(k), std::move(text),
                             [k](const OpDims& d) { return unit_factors(k, d); }};
    };
    std::vector<CompendiumEntry> v;
    v.push_back(entry(OpKind::MatMul, "alpha=m^-1/2, beta_x=n^-1/2, beta_w=b^-1/2"));
    v.push_back(entry(OpKind::Sum, "alpha=n^-1/2, beta=1"));
    v.push_back(entry(OpKind::WeightedAdd, "alpha=(sum gamma_i^2)^-1/2, beta_i=gamma_i^-1"));
    v.push_back(entry(OpKind::Relu, "alpha=sqrt(2/(1-1/pi)), beta=sqrt(2)"));
    v.push_back(entry(OpKind::Gelu, "alpha=1.701, beta=1.481"));
    v.push_back(entry(OpKind::Tanh, "alpha=1.593, beta=1.467"));
    v.push_back(entry(OpKind::Sigmoid, "alpha=4.802, beta=4.722"));
    v.push_back(entry(OpKind::Softmax, "alpha=s, beta=s"));
    v.push_back(entry(OpKind::SoftmaxXent, "alpha=1, beta=s/sqrt(s-1)"));
    v.push_back(entry(OpKind::LayerNorm, "alpha=1, beta_x=1, beta_w=beta_c=b^-1/2"));
    return v;
  }();
  return table;
}

inline const CompendiumEntry& compendium_entry(const std::string& op) {
  for (const CompendiumEntry& e : compendium())
    if (e.op == op) return e;
  throw std::invalid_argument("no compendium entry for op '" + op + "'");
}

// ---------------------------------------------------------------------------
// Graph construction helpers: apply an op with its unit factors derived from
// the input shapes. Constraint resolution happens afterwards, over the whole
// graph.

inline OpDims dims_from_shapes(OpKind kind, const std::vector<Shape>& in,
                               const NodeAttrs& attrs) {
  OpDims d;
  switch (kind) {
    case OpKind::MatMul:
      d.b = in[0][0];
      d.m = in[0][1];
      d.n = in[1][1];
      break;
    case OpKind::Sum:
      d.n = shape_numel(in[0]);
      break;
    case OpKind::WeightedAdd:
      d.gammas = attrs.gammas;
      break;
    case OpKind::Softmax:
    case OpKind::SoftmaxXent:
      d.s = in[0].back();
      break;
    case OpKind::LayerNorm:
      d.b = in[0][0];
      break;
    default:
      break;
  }
  return d;
}

/// Apply `kind` with the compendium's unconstrained unit factors.
inline Builder::Value apply_unit_scaled(Builder& b, OpKind kind,
                                        const std::vector<Builder::Value>& ins,
                                        NodeAttrs attrs = {}) {
  std::vector<Shape> shapes;
  for (auto v : ins) shapes.push_back(b.value_shape(v));
  ScaleFactors sf = unit_factors(kind, dims_from_shapes(kind, shapes, attrs));
  return b.apply(kind, ins, std::move(sf), std::move(attrs));
}

/// id*(x, alpha, beta): the scaled identity. Its factors are a deliberate
/// choice, so they are pinned against constraint resolution.
///
/// Several familiar schemes are factor choices in this framework and need no
/// code of their own:
///  - classic fan-in/fan-out initialisation: fully constrain a projection,
///    combine the scales, and fold the result into the weight init;
///  - loss scaling: a scaled identity before the loss with alpha = 1 and
///    beta = the loss scale (its edge is always a cut edge, so beta is free);
///  - attention score scaling: a fully constrained similarity matmul, giving
///    alpha = beta_1 = beta_2 = d^-1/2.
inline Builder::Value scaled_identity(Builder& b, Builder::Value x, double alpha,
                                      double beta) {
  NodeAttrs attrs;
  attrs.pin_factors = true;
  return b.apply(OpKind::Identity, {x}, ScaleFactors{alpha, {beta}}, attrs);
}

// ---------------------------------------------------------------------------
// Residual schemes

struct ResidualScheme {
  enum class Kind { none, default_add, fixed, running_mean };
  Kind kind = Kind::fixed;
  double tau = 0.5;

  static ResidualScheme none() { return {Kind::none, 0.0}; }
  static ResidualScheme default_add() { return {Kind::default_add, 0.0}; }
  static ResidualScheme fixed(double tau) {
    if (tau <= 0.0 || tau >= 1.0) throw std::invalid_argument("fixed residual: tau in (0,1)");
    return {Kind::fixed, tau};
  }
  static ResidualScheme running_mean() { return {Kind::running_mean, 0.0}; }

  /// (skip, branch) weights at 1-based layer index l.
  std::pair<double, double> weights(int l) const {
    switch (kind) {
      case Kind::default_add: return {1.0, 1.0};
      case Kind::fixed: return {std::sqrt(1.0 - tau), std::sqrt(tau)};
      case Kind::running_mean:
        return {std::sqrt(static_cast<double>(l) / (l + 1.0)), std::sqrt(1.0 / (l + 1.0))};
      case Kind::none: throw std::logic_error("no weights for scheme 'none'");
    }
    throw std::logic_error("unhandled residual scheme");
  }
};

/// gamma . f(x) as id*(f(id*(x, 1, gamma)), gamma, 1): the forward value is
/// unchanged, but backward values inside f keep unit scale because the gamma
/// is deferred to the outer identity. The two identities cancel along the
/// residual cycle, so the enclosing graph remains a scaled op.
inline Builder::Value residual_rewrite(
    Builder& b, Builder::Value x,
    const std::function<Builder::Value(Builder&, Builder::Value)>& f, double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("residual_rewrite: gamma must be positive");
  Builder::Value inner = scaled_identity(b, x, 1.0, gamma);
  Builder::Value fx = f(b, inner);
  return scaled_identity(b, fx, gamma, 1.0);
}

/// Weighted residual join for a unit-scaled model: the skip side is a
/// fully-constrained identity (alpha = beta = gamma_skip), the branch side
/// carries the rewrite above, and the join is a plain add.
inline Builder::Value unit_residual(
    Builder& b, Builder::Value x,
    const std::function<Builder::Value(Builder&, Builder::Value)>& f,
    const ResidualScheme& scheme, int layer_index) {
  auto [g_skip, g_branch] = scheme.weights(layer_index);
  Builder::Value skip = scaled_identity(b, x, g_skip, g_skip);
  Builder::Value branch = residual_rewrite(b, x, f, g_branch);
  NodeAttrs attrs;
  attrs.pin_factors = true;  // the gammas already carry the weighting
  return b.apply(OpKind::Add, {skip, branch}, ScaleFactors::unit(2), attrs);
}

// ---------------------------------------------------------------------------
// Empirical scaling oracle and alignment helpers

struct ElementwiseFn {
  std::function<double(double)> f;
  std::function<double(double)> df;
};

inline ElementwiseFn elementwise_fn(OpKind kind) {
  switch (kind) {
    case OpKind::Identity:
      return {[](double x) { return x; }, [](double) { return 1.0; }};
    case OpKind::Relu: return {relu_fn, relu_grad_fn};
    case OpKind::Gelu: return {gelu_fn, gelu_grad_fn};
    case OpKind::Tanh:
      return {[](double x) { return std::tanh(x); }, tanh_grad_fn};
    case OpKind::Sigmoid: return {sigmoid_fn, sigmoid_grad_fn};
    case OpKind::Square:
      return {[](double x) { return x * x; }, [](double x) { return 2.0 * x; }};
    default: throw std::invalid_argument("not an elementwise op");
  }
}

struct EmpiricalScale {
  double forward_std = 0.0;   // std of f(X), X ~ N(0,1)
  double backward_std = 0.0;  // std of f'(X) . G, G ~ N(0,1)
};

/// Monte-Carlo estimate of the forward/backward scale of an elementwise op
/// under unit-normal inputs and gradients. This is the oracle the activation
/// constants are validated against.
inline EmpiricalScale empirical_scale(const ElementwiseFn& fn, std::int64_t n,
                                      std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("empirical_scale: n >= 2");
  Rng rng(seed);
  double sf = 0.0, sf2 = 0.0, sb = 0.0, sb2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = rng.normal();
    const double g = rng.normal();
    const double y = fn.f(x);
    const double d = fn.df(x) * g;
    sf += y;
    sf2 += y * y;
    sb += d;
    sb2 += d * d;
  }
  const double nn = static_cast<double>(n);
  EmpiricalScale out;
  out.forward_std = std::sqrt(std::max(0.0, sf2 / nn - (sf / nn) * (sf / nn)));
  out.backward_std = std::sqrt(std::max(0.0, sb2 / nn - (sb / nn) * (sb / nn)));
  return out;
}

inline EmpiricalScale empirical_scale(OpKind kind, std::int64_t n, std::uint64_t seed) {
  return empirical_scale(elementwise_fn(kind), n, seed);
}

struct ActivationAlignment {
  double s1 = 1.0;  // pre-scale: the base model's input std
  double s2 = 1.0;  // post-scale: restores unit output std
};

/// Pre/post factors so that f(s1 . x_hat) . s2 reproduces the base model's
/// activation behaviour while keeping unit output scale. The base output
/// scale is measured by Monte-Carlo at input scale s1.
inline ActivationAlignment align_activation(const ElementwiseFn& fn, double sigma_in,
                                            std::int64_t n = 1 << 20,
                                            std::uint64_t seed = 99) {
  if (sigma_in <= 0.0) throw std::invalid_argument("align_activation: scales must be positive");
  Rng rng(seed);
  double s = 0.0, s2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double y = fn.f(sigma_in * rng.normal());
    s += y;
    s2 += y * y;
  }
  const double nn = static_cast<double>(n);
  const double out_std = std::sqrt(std::max(0.0, s2 / nn - (s / nn) * (s / nn)));
  if (out_std <= 0.0)
    throw std::invalid_argument("align_activation: base output scale is zero");
  return {sigma_in, 1.0 / out_std};
}

inline ActivationAlignment align_activation(const ElementwiseFn& fn, double sigma_in,
                                            double sigma_out_base) {
  if (sigma_in <= 0.0 || sigma_out_base <= 0.0)
    throw std::invalid_argument("align_activation: scales must be positive");
  (void)fn;
  return {sigma_in, 1.0 / sigma_out_base};
}

struct ResidualTau {
  double tau = 0.5;
  double alpha = 1.0;
};

/// Interpolation weight and output factor matching a base model's x + f(x)
/// given the base scales of x and f(x).
inline ResidualTau residual_tau(double sigma_x, double sigma_fx) {
  if (sigma_x <= 0.0 || sigma_fx <= 0.0)
    throw std::invalid_argument("residual_tau: scales must be positive");
  const double vx = sigma_x * sigma_x, vf = sigma_fx * sigma_fx;
  return {vf / (vx + vf), 1.0 / std::sqrt(vx + vf)};
}

}  // namespace unitscale
