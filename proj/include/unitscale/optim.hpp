#pragma once
// SGD and Adam over lists of parameter tensors, with optional per-tensor
// step-size multipliers.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscale/tensor.hpp"

namespace unitscale {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.0;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  std::vector<Tensor> momentum;       // SGD velocity
  std::vector<Tensor> m, v;           // Adam moments
  std::int64_t step_count = 0;
  std::vector<double> step_scale;     // per-tensor step-size multipliers (empty: all 1)

  static OptimState for_params(const std::vector<Tensor>& params) {
    OptimState s;
    for (const Tensor& p : params) {
      s.momentum.push_back(zeros(p.shape()));
      s.m.push_back(zeros(p.shape()));
      s.v.push_back(zeros(p.shape()));
    }
    return s;
  }
  double scale_for(size_t i) const {
    return step_scale.empty() ? 1.0 : step_scale.at(i);
  }
};

namespace detail {
inline void check_optim_shapes(const std::vector<Tensor>& params,
                               const std::vector<Tensor>& grads, const OptimState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("optimizer: parameter/gradient/state count mismatch");
  for (size_t i = 0; i < params.size(); ++i)
    if (!same_shape(params[i], grads[i]))
      throw std::invalid_argument("optimizer: shape mismatch at parameter " +
                                  std::to_string(i));
}
}  // namespace detail

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                     OptimState& st, const SgdConfig& cfg) {
  detail::check_optim_shapes(params, grads, st);
  ++st.step_count;
  for (size_t i = 0; i < params.size(); ++i) {
    const double lr = cfg.lr * st.scale_for(i);
    for (std::int64_t k = 0; k < params[i].numel(); ++k) {
      double upd = grads[i][k];
      if (cfg.momentum != 0.0) {
        st.momentum[i][k] = cfg.momentum * st.momentum[i][k] + grads[i][k];
        upd = st.momentum[i][k];
      }
      params[i][k] -= lr * upd;
    }
  }
}

/// Adam with bias correction. With eps = 0 a zero second moment yields a
/// zero update (the m = v = 0 limit), which keeps exactly-zero gradients
/// from producing NaNs.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      OptimState& st, const AdamConfig& cfg) {
  detail::check_optim_shapes(params, grads, st);
  ++st.step_count;
  const double t = static_cast<double>(st.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    const double lr = cfg.lr * st.scale_for(i);
    for (std::int64_t k = 0; k < params[i].numel(); ++k) {
      const double g = grads[i][k];
      st.m[i][k] = cfg.beta1 * st.m[i][k] + (1.0 - cfg.beta1) * g;
      st.v[i][k] = cfg.beta2 * st.v[i][k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = st.m[i][k] / bc1;
      const double vhat = st.v[i][k] / bc2;
      const double denom = std::sqrt(vhat) + cfg.eps;
      if (denom != 0.0) params[i][k] -= lr * mhat / denom;
    }
  }
}

inline bool all_finite(const std::vector<Tensor>& ts) {
  for (const Tensor& t : ts)
    if (!all_finite(t)) return false;
  return true;
}

/// Per-tensor step-size multipliers compensating the larger effective step
/// unit scaling implies for non-projection parameters: 1/sqrt(hidden) for
/// those, 1 for projections.
inline std::vector<double> lr_compensation(const std::vector<bool>& is_projection,
                                           std::int64_t hidden_size) {
  if (hidden_size < 1) throw std::invalid_argument("lr_compensation: hidden_size >= 1");
  std::vector<double> out;
  const double non_proj = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  for (bool proj : is_projection) out.push_back(proj ? 1.0 : non_proj);
  return out;
}

}  // namespace unitscale
