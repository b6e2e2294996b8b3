#pragma once
// Desk-scale training: toy FFN models (unit-scaled or conventional),
// deterministic synthetic datasets, the train loop with simulated-precision
// matmul inputs and loss scaling, and the optimizer-equivalence checks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscale/float_format.hpp"
#include "unitscale/graph.hpp"
#include "unitscale/ops.hpp"
#include "unitscale/optim.hpp"
#include "unitscale/snr.hpp"
#include "unitscale/tensor.hpp"

namespace unitscale {

// ---------------------------------------------------------------------------
// Unit scaling over a whole graph

/// Unconstrained unit-scale proposals for every factor: compendium formulas
/// for the ops they cover, current values for identities and pinned nodes.
/// Copies of shared parameters get the equal-weight rule beta = 1/sqrt(k).
inline graph::FactorMap unit_proposals(const graph::Graph& g) {
  graph::FactorMap m;
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    const graph::Node& n = g.nodes[v];
    ScaleFactors f = n.scale;
    if (!n.attrs.pin_factors) {
      switch (n.kind) {
        case OpKind::Identity:
          break;
        case OpKind::Copy: {
          const graph::Edge& in = g.edges[n.in_edges[0]];
          const bool shared_param =
              in.from_node < 0 && g.input_kinds[in.from_port] == graph::InputKind::parameter;
          f = ScaleFactors::unit(1);
          if (shared_param)
            f.betas[0] = 1.0 / std::sqrt(static_cast<double>(n.attrs.fanout));
          break;
        }
        default: {
          std::vector<Shape> shapes;
          for (int e : n.in_edges) shapes.push_back(g.edges[e].shape);
          f = unit_factors(n.kind, dims_from_shapes(n.kind, shapes, n.attrs));
          break;
        }
      }
    }
    m[{static_cast<int>(v), -1}] = f.alpha;
    for (size_t s = 0; s < f.betas.size(); ++s)
      m[{static_cast<int>(v), static_cast<int>(s)}] = f.betas[s];
  }
  return m;
}

/// The full scaling strategy: propose unit factors, resolve the non-cut-edge
/// constraint groups by geometric mean (pinned rewrite nodes keep their
/// cancelling pairs), and validate the result.
inline graph::Graph apply_unit_scaling(const graph::Graph& g) {
  std::set<int> pinned;
  for (size_t v = 0; v < g.nodes.size(); ++v)
    if (g.nodes[v].attrs.pin_factors) pinned.insert(static_cast<int>(v));
  graph::Graph out =
      graph::with_factors(g, graph::resolve_constraints(g, unit_proposals(g), pinned));
  graph::edge_scale_ratios(out);  // throws if the assignment is invalid
  return out;
}

// ---------------------------------------------------------------------------
// Toy models

enum class NormPlacement { none, pre, post };

inline NormPlacement norm_from_name(const std::string& s) {
  if (s == "none") return NormPlacement::none;
  if (s == "pre") return NormPlacement::pre;
  if (s == "post") return NormPlacement::post;
  throw std::invalid_argument("unknown norm placement '" + s + "'");
}

struct ParamInit {
  enum class Kind { normal, constant };
  Kind kind = Kind::normal;
  double value = 1.0;  // std for normal, value for constant
};

struct ToyModel {
  graph::Graph g;
  int x_input = -1;
  int target_input = -1;               // -1 when the model has no loss head
  std::vector<int> param_inputs;       // graph input indices
  std::vector<std::string> param_names;
  std::vector<bool> param_projection;
  std::vector<ParamInit> param_init;
  std::vector<std::pair<std::string, int>> traced_edges;  // name -> edge id
  double loss_to_mean = 1.0;  // multiplier turning the loss output into mean xent
  bool unit_scaled = false;
  std::int64_t hidden = 0;

  std::vector<Tensor> make_params(std::uint64_t seed) const {
    std::vector<Tensor> out;
    for (size_t i = 0; i < param_inputs.size(); ++i) {
      const Shape& shape = g.input_shape(param_inputs[i]);
      if (param_init[i].kind == ParamInit::Kind::constant)
        out.push_back(full(shape, param_init[i].value));
      else
        out.push_back(randn(shape, param_init[i].value, seed * 7919 + i));
    }
    return out;
  }

  /// Assemble the graph input list from a data batch and parameter values.
  std::vector<Tensor> assemble_inputs(const Tensor& x, const Tensor* targets,
                                      const std::vector<Tensor>& params) const {
    std::vector<Tensor> inputs(g.num_inputs());
    inputs[x_input] = x;
    if (target_input >= 0) {
      if (!targets) throw std::invalid_argument("model needs targets");
      inputs[target_input] = *targets;
    }
    for (size_t i = 0; i < param_inputs.size(); ++i) inputs[param_inputs[i]] = params[i];
    return inputs;
  }
};

struct FfnConfig {
  std::int64_t batch = 128;
  std::int64_t in_dim = 0;  // 0: equal to hidden (no input projection)
  std::int64_t hidden = 256;
  std::int64_t ffn = 1024;
  int depth = 4;
  ResidualScheme scheme = ResidualScheme::fixed(0.5);
  NormPlacement norm = NormPlacement::pre;
  std::int64_t classes = 0;  // 0: no loss head
  bool unit_scaled = true;
  double baseline_init_std = 0.0;  // 0: fan-in 1/sqrt(fan_in); else fixed (e.g. 0.02)
};

/// Residual stack of (matmul -> gelu -> matmul) blocks with optional input
/// projection and softmax cross-entropy head. unit_scaled applies the whole
/// recipe: unit-variance init, compendium factors, geometric-mean constraint
/// resolution, weighted residual adds via the identity rewrite.
inline ToyModel build_unit_ffn(const FfnConfig& cfg) {
  if (cfg.hidden < 2 || cfg.ffn < 2 || cfg.depth < 1)
    throw std::invalid_argument("build_unit_ffn: sizes must be >= 2, depth >= 1");
  const std::int64_t in_dim = cfg.in_dim > 0 ? cfg.in_dim : cfg.hidden;

  ToyModel model;
  model.unit_scaled = cfg.unit_scaled;
  model.hidden = cfg.hidden;

  Builder b;
  auto x_in = b.input({cfg.batch, in_dim}, graph::InputKind::data);
  model.x_input = 0;
  int next_input = 1;

  std::vector<std::pair<Builder::Value, std::string>> params;
  auto param = [&](Shape shape, const std::string& name, bool projection,
                   std::int64_t fan_in) {
    auto v = b.input(std::move(shape), graph::InputKind::parameter);
    params.push_back({v, name});
    model.param_inputs.push_back(next_input++);
    model.param_names.push_back(name);
    model.param_projection.push_back(projection);
    ParamInit init;
    if (!projection) {
      init = {ParamInit::Kind::constant, name.substr(0, 2) == "ln" && name.back() == 'w'
                                             ? 1.0
                                             : 0.0};
    } else if (cfg.unit_scaled) {
      init = {ParamInit::Kind::normal, 1.0};
    } else {
      init = {ParamInit::Kind::normal, cfg.baseline_init_std > 0.0
                                           ? cfg.baseline_init_std
                                           : 1.0 / std::sqrt(static_cast<double>(fan_in))};
    }
    model.param_init.push_back(init);
    return v;
  };

  auto matmul_op = [&](Builder::Value x, Builder::Value w) {
    return cfg.unit_scaled ? apply_unit_scaled(b, OpKind::MatMul, {x, w})
                           : b.apply(OpKind::MatMul, {x, w});
  };
  auto act_op = [&](Builder::Value z) {
    return cfg.unit_scaled ? apply_unit_scaled(b, OpKind::Gelu, {z})
                           : b.apply(OpKind::Gelu, {z});
  };
  auto norm_op = [&](Builder::Value z, int layer) {
    auto w = param({cfg.hidden}, "ln" + std::to_string(layer) + "_w", false, cfg.hidden);
    auto c = param({cfg.hidden}, "ln" + std::to_string(layer) + "_c", false, cfg.hidden);
    return cfg.unit_scaled ? apply_unit_scaled(b, OpKind::LayerNorm, {z, w, c})
                           : b.apply(OpKind::LayerNorm, {z, w, c});
  };
  auto trace = [&](Builder::Value v, const std::string& name) {
    model.traced_edges.push_back({name, v.id});  // value id; remapped after freeze
    return v;
  };

  Builder::Value x = x_in;
  trace(x, "x0");
  if (in_dim != cfg.hidden) {
    auto w_in = param({in_dim, cfg.hidden}, "w_in", true, in_dim);
    x = trace(matmul_op(x, w_in), "proj_in");
  }

  for (int l = 0; l < cfg.depth; ++l) {
    const std::string tag = std::to_string(l + 1);
    auto ffn_branch = [&](Builder&, Builder::Value z) {
      auto w1 = param({cfg.hidden, cfg.ffn}, "w1_" + tag, true, cfg.hidden);
      auto w2 = param({cfg.ffn, cfg.hidden}, "w2_" + tag, true, cfg.ffn);
      auto z1 = trace(matmul_op(z, w1), "z1_" + tag);
      auto a1 = trace(act_op(z1), "a1_" + tag);
      return trace(matmul_op(a1, w2), "z2_" + tag);
    };
    if (cfg.scheme.kind == ResidualScheme::Kind::none) {
      Builder::Value z = cfg.norm == NormPlacement::pre ? norm_op(x, l + 1) : x;
      x = ffn_branch(b, z);
      if (cfg.norm == NormPlacement::post) x = norm_op(x, l + 1);
    } else if (cfg.unit_scaled) {
      if (cfg.scheme.kind == ResidualScheme::Kind::default_add)
        throw std::invalid_argument("default residual add is not unit-scalable");
      auto branch = [&](Builder& bb, Builder::Value z) {
        if (cfg.norm == NormPlacement::pre) z = norm_op(z, l + 1);
        return ffn_branch(bb, z);
      };
      x = unit_residual(b, x, branch, cfg.scheme, l + 1);
      if (cfg.norm == NormPlacement::post) x = norm_op(x, l + 1);
    } else {
      Builder::Value z = cfg.norm == NormPlacement::pre ? norm_op(x, l + 1) : x;
      Builder::Value branch = ffn_branch(b, z);
      auto [gs, gb] = cfg.scheme.kind == ResidualScheme::Kind::default_add
                          ? std::pair<double, double>{1.0, 1.0}
                          : cfg.scheme.weights(l + 1);
      x = b.apply(OpKind::WeightedAdd, {x, branch}, std::nullopt,
                  NodeAttrs{{gs, gb}, 1, false});
      if (cfg.norm == NormPlacement::post) x = norm_op(x, l + 1);
    }
    trace(x, "x" + tag);
  }

  if (cfg.classes > 0) {
    auto w_head = param({cfg.hidden, cfg.classes}, "w_head", true, cfg.hidden);
    auto logits = trace(matmul_op(x, w_head), "logits");
    auto targets = b.input({cfg.batch}, graph::InputKind::data);
    model.target_input = next_input++;
    auto row_loss =
        cfg.unit_scaled
            ? apply_unit_scaled(b, OpKind::SoftmaxXent, {logits, targets})
            : b.apply(OpKind::SoftmaxXent, {logits, targets});
    Builder::Value loss;
    if (cfg.unit_scaled) {
      loss = apply_unit_scaled(b, OpKind::Sum, {row_loss});
      model.loss_to_mean = 1.0 / std::sqrt(static_cast<double>(cfg.batch));
    } else {
      const double inv_b = 1.0 / static_cast<double>(cfg.batch);
      loss = b.apply(OpKind::Sum, {row_loss}, ScaleFactors{inv_b, {inv_b}});
      model.loss_to_mean = 1.0;
    }
    b.output(loss);
  } else {
    b.output(x);
  }

  std::map<int, int> value_edge;
  model.g = b.freeze(&value_edge);
  for (auto& [name, id] : model.traced_edges) id = value_edge.at(id);

  if (cfg.unit_scaled) model.g = apply_unit_scaling(model.g);
  return model;
}

inline ToyModel build_unit_ffn(std::int64_t hidden, std::int64_t ffn_size, int depth,
                               ResidualScheme scheme, bool unit_scaled) {
  FfnConfig cfg;
  cfg.hidden = hidden;
  cfg.ffn = ffn_size;
  cfg.depth = depth;
  cfg.scheme = scheme;
  cfg.unit_scaled = unit_scaled;
  return build_unit_ffn(cfg);
}

// ---------------------------------------------------------------------------
// Deterministic synthetic datasets

struct Batch {
  Tensor x;
  Tensor targets;
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual Batch batch(int step) const = 0;
  virtual Shape x_shape() const = 0;
  virtual std::int64_t classes() const = 0;
};

/// Mixture of Gaussians: fixed unit-normal class means,
/// x = signal . mu + sqrt(1 - signal^2) . eps (unit marginal scale). With the
/// default signal the classes are linearly separable with high probability
/// once dim >= classes; smaller signals leave an irreducible loss floor.
class GaussianMixtureDataset : public Dataset {
 public:
  GaussianMixtureDataset(std::int64_t num_classes, std::int64_t dim, std::int64_t batch,
                         std::uint64_t seed, double signal = 0.8)
      : classes_(num_classes), dim_(dim), batch_(batch), seed_(seed), signal_(signal),
        noise_(std::sqrt(1.0 - signal * signal)) {
    if (num_classes < 2 || dim < 1 || batch < 1)
      throw std::invalid_argument("mixture dataset: bad sizes");
    if (signal <= 0.0 || signal >= 1.0)
      throw std::invalid_argument("mixture dataset: signal in (0,1)");
    means_ = randn({classes_, dim_}, 1.0, seed ^ 0x9e3779b97f4a7c15ull);
  }

  Batch batch(int step) const override {
    Rng rng(seed_ + 0x51ull * static_cast<std::uint64_t>(step + 1));
    Tensor x({batch_, dim_});
    Tensor t({batch_});
    for (std::int64_t r = 0; r < batch_; ++r) {
      const std::int64_t c = static_cast<std::int64_t>(rng.below(classes_));
      t[r] = static_cast<double>(c);
      for (std::int64_t j = 0; j < dim_; ++j)
        x[r * dim_ + j] = signal_ * means_[c * dim_ + j] + noise_ * rng.normal();
    }
    return {std::move(x), std::move(t)};
  }
  Shape x_shape() const override { return {batch_, dim_}; }
  std::int64_t classes() const override { return classes_; }

 private:
  std::int64_t classes_, dim_, batch_;
  std::uint64_t seed_;
  double signal_, noise_;
  Tensor means_;
};

/// Byte-level language modelling over a deterministic pseudo-text corpus.
/// The model sees `context` one-hot bytes concatenated and predicts the next
/// byte; the corpus repeats, so the task is fully learnable.
class ByteLmDataset : public Dataset {
 public:
  ByteLmDataset(std::int64_t vocab, std::int64_t context, std::int64_t batch,
                std::uint64_t seed, std::int64_t corpus_len = 4096)
      : vocab_(vocab), context_(context), batch_(batch), seed_(seed) {
    if (vocab < 2 || context < 1 || batch < 1)
      throw std::invalid_argument("byte-lm dataset: bad sizes");
    Rng rng(seed ^ 0xc2b2ae3d27d4eb4full);
    corpus_.resize(corpus_len);
    // Markov-style text: mostly follow a fixed successor table, sometimes jump.
    std::vector<std::int64_t> successor(vocab);
    for (std::int64_t v = 0; v < vocab; ++v)
      successor[v] = static_cast<std::int64_t>(rng.below(vocab));
    std::int64_t cur = 0;
    for (std::int64_t i = 0; i < corpus_len; ++i) {
      corpus_[i] = cur;
      cur = rng.uniform() < 0.9 ? successor[cur]
                                : static_cast<std::int64_t>(rng.below(vocab));
    }
  }

  Batch batch(int step) const override {
    Rng rng(seed_ + 0x9d7ull * static_cast<std::uint64_t>(step + 1));
    Tensor x({batch_, context_ * vocab_});
    Tensor t({batch_});
    const std::int64_t n = static_cast<std::int64_t>(corpus_.size());
    for (std::int64_t r = 0; r < batch_; ++r) {
      const std::int64_t pos =
          static_cast<std::int64_t>(rng.below(n - context_ - 1));
      for (std::int64_t k = 0; k < context_; ++k)
        x[r * context_ * vocab_ + k * vocab_ + corpus_[pos + k]] = 1.0;
      t[r] = static_cast<double>(corpus_[pos + context_]);
    }
    return {std::move(x), std::move(t)};
  }
  Shape x_shape() const override { return {batch_, context_ * vocab_}; }
  std::int64_t classes() const override { return vocab_; }

 private:
  std::int64_t vocab_, context_, batch_;
  std::uint64_t seed_;
  std::vector<std::int64_t> corpus_;
};

// ---------------------------------------------------------------------------
// Training loop

struct PrecisionConfig {
  std::string act_weight_format;  // catalog id; empty = reference precision
  std::string grad_format;
  double loss_scale = 1.0;  // 1 disables
};

struct OptimConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  SgdConfig sgd;
  AdamConfig adam;
  bool compensate_lr = false;  // apply 1/sqrt(hidden) to non-projection params
};

struct TrainOptions {
  int steps = 100;
  std::uint64_t seed = 0;
  int stats_every = 0;  // 0 disables the trace
  int hist_every = 0;
  int divergence_limit = 20;  // consecutive non-finite losses before aborting
};

struct StepRecord {
  int step;
  double loss;  // mean cross entropy
  bool skipped;
};

struct TensorStat {
  int step;
  std::string name;
  double mean;
  double std;
};

struct HistRecord {
  int step;
  std::string name;
  ExponentHistogram hist;
};

struct TrainResult {
  std::vector<StepRecord> losses;
  std::vector<TensorStat> stats;
  std::vector<HistRecord> hists;
  std::vector<Tensor> final_params;
  int skipped_steps = 0;
  bool diverged = false;
  int diverged_at_step = -1;

  /// Mean loss over the final `tail` non-skipped steps.
  double final_loss(int tail = 20) const {
    double acc = 0.0;
    int n = 0;
    for (auto it = losses.rbegin(); it != losses.rend() && n < tail; ++it) {
      if (it->skipped || !std::isfinite(it->loss)) continue;
      acc += it->loss;
      ++n;
    }
    return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
  }
};

/// Train the model. Matmul inputs are quantized per the precision config
/// (overflow mapped to infinity so it stays observable); the loss is
/// multiplied by loss_scale before the backward pass and weight gradients
/// divided by it before the optimizer; steps with non-finite gradients are
/// skipped and counted.
inline TrainResult train_loop(const ToyModel& model, const Dataset& data,
                              const OptimConfig& optim, const PrecisionConfig& precision,
                              const TrainOptions& opts) {
  if (model.target_input < 0)
    throw std::invalid_argument("train_loop: model has no loss head");
  if (precision.loss_scale <= 0.0)
    throw std::invalid_argument("train_loop: loss_scale must be positive");

  std::optional<FloatFormat> fmt_data, fmt_grad;
  graph::MatmulPrecision prec;
  const graph::MatmulPrecision* prec_ptr = nullptr;
  if (!precision.act_weight_format.empty() || !precision.grad_format.empty()) {
    const std::string& d = !precision.act_weight_format.empty()
                               ? precision.act_weight_format
                               : precision.grad_format;
    const std::string& gr = !precision.grad_format.empty() ? precision.grad_format : d;
    fmt_data = format_by_name(d).with_overflow(OverflowPolicy::to_infinity);
    fmt_grad = format_by_name(gr).with_overflow(OverflowPolicy::to_infinity);
    prec.data_format = &*fmt_data;
    prec.grad_format = &*fmt_grad;
    prec_ptr = &prec;
  }

  std::vector<Tensor> params = model.make_params(opts.seed);
  OptimState state = OptimState::for_params(params);
  if (optim.compensate_lr)
    state.step_scale = lr_compensation(model.param_projection, model.hidden);

  TrainResult result;
  int consecutive_bad = 0;

  for (int step = 0; step < opts.steps; ++step) {
    const Batch batch = data.batch(step);
    const std::vector<Tensor> inputs =
        model.assemble_inputs(batch.x, &batch.targets, params);
    graph::BackwardTape tape;
    const std::vector<Tensor> outs = graph::forward(model.g, inputs, &tape, prec_ptr);
    const double loss = outs[0].value() * model.loss_to_mean;

    if (!std::isfinite(loss)) {
      ++consecutive_bad;
      if (consecutive_bad > opts.divergence_limit) {
        result.diverged = true;
        result.diverged_at_step = step;
        result.losses.push_back({step, loss, true});
        break;
      }
    } else {
      consecutive_bad = 0;
    }

    const std::vector<Tensor> grads = graph::backward(
        model.g, tape, {Tensor::scalar(precision.loss_scale)}, graph::BackwardKind::scaled,
        prec_ptr);

    std::vector<Tensor> param_grads;
    for (size_t i = 0; i < model.param_inputs.size(); ++i) {
      Tensor gw = grads[model.param_inputs[i]];
      if (precision.loss_scale != 1.0) gw = scale(gw, 1.0 / precision.loss_scale);
      param_grads.push_back(std::move(gw));
    }

    const bool trace_stats = opts.stats_every > 0 && step % opts.stats_every == 0;
    const bool trace_hists = opts.hist_every > 0 && step % opts.hist_every == 0;
    if (trace_stats || trace_hists) {
      auto record = [&](const std::string& name, const Tensor& t) {
        if (trace_stats) {
          const ScaleStats st = stats(t);
          result.stats.push_back({step, name, st.mean, st.std});
        }
        if (trace_hists) result.hists.push_back({step, name, exponent_histogram(t)});
      };
      for (const auto& [name, eid] : model.traced_edges) {
        record(name, tape.z[eid]);
        record("grad_" + name, tape.h[eid]);
      }
      for (size_t i = 0; i < param_grads.size(); ++i)
        record("gradw_" + model.param_names[i], param_grads[i]);
    }

    bool skipped = !std::isfinite(loss);
    if (!skipped && !all_finite(param_grads)) skipped = true;
    if (skipped) {
      ++result.skipped_steps;
    } else if (optim.kind == OptimConfig::Kind::sgd) {
      sgd_step(params, param_grads, state, optim.sgd);
    } else {
      adam_step(params, param_grads, state, optim.adam);
    }
    result.losses.push_back({step, loss, skipped});
  }

  result.final_params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer reparameterization checks

/// A scalar-output scaled op with designated parameter inputs; the remaining
/// inputs are fed deterministic per-step data.
struct ReparamProblem {
  graph::Graph g;
  std::vector<int> param_inputs;
  std::vector<int> data_inputs;
  std::uint64_t data_seed = 0;

  std::vector<Tensor> data_at(int step) const {
    std::vector<Tensor> out;
    for (size_t i = 0; i < data_inputs.size(); ++i)
      out.push_back(randn(g.input_shape(data_inputs[i]), 1.0,
                          data_seed + 1315423911ull * static_cast<std::uint64_t>(step) + i));
    return out;
  }

  std::vector<Tensor> assemble(const std::vector<Tensor>& theta,
                               const std::vector<Tensor>& data) const {
    std::vector<Tensor> inputs(g.num_inputs());
    for (size_t i = 0; i < param_inputs.size(); ++i) inputs[param_inputs[i]] = theta[i];
    for (size_t i = 0; i < data_inputs.size(); ++i) inputs[data_inputs[i]] = data[i];
    return inputs;
  }
};

namespace detail {
inline std::vector<Tensor> problem_grads(const ReparamProblem& p,
                                         const std::vector<Tensor>& theta,
                                         const std::vector<Tensor>& data,
                                         graph::BackwardKind kind) {
  graph::BackwardTape tape;
  graph::forward(p.g, p.assemble(theta, data), &tape);
  const std::vector<Tensor> grads =
      graph::backward(p.g, tape, {full(p.g.output_shape(0), 1.0)}, kind);
  std::vector<Tensor> out;
  for (int idx : p.param_inputs) out.push_back(grads[idx]);
  return out;
}
}  // namespace detail

/// Train the scaled op under SGD and, in parallel, the equivalent unscaled op
/// f_hat(theta) = F(sqrt(c) . theta) from theta0 / sqrt(c), where c_i is the
/// op's gradient scale ratio and F the computed forward. Returns the largest
/// deviation max_t,i |theta_hat - theta* / sqrt(c)| over the trajectories.
inline double sgd_reparam_check(const ReparamProblem& p, const std::vector<Tensor>& theta0,
                                int steps, double lr) {
  const std::vector<double> ratios = graph::gradient_scale_ratios(p.g);
  std::vector<double> c;
  for (int idx : p.param_inputs) c.push_back(ratios[idx]);

  std::vector<Tensor> theta_star = theta0;
  std::vector<Tensor> theta_hat;
  for (size_t i = 0; i < theta0.size(); ++i)
    theta_hat.push_back(scale(theta0[i], 1.0 / std::sqrt(c[i])));

  double worst = 0.0;
  for (int t = 0; t < steps; ++t) {
    const std::vector<Tensor> data = p.data_at(t);

    const std::vector<Tensor> g_star =
        detail::problem_grads(p, theta_star, data, graph::BackwardKind::scaled);
    for (size_t i = 0; i < theta_star.size(); ++i)
      for (std::int64_t k = 0; k < theta_star[i].numel(); ++k)
        theta_star[i][k] -= lr * g_star[i][k];

    std::vector<Tensor> scaled_hat;  // F evaluated at sqrt(c) . theta_hat
    for (size_t i = 0; i < theta_hat.size(); ++i)
      scaled_hat.push_back(scale(theta_hat[i], std::sqrt(c[i])));
    const std::vector<Tensor> g_hat =
        detail::problem_grads(p, scaled_hat, data, graph::BackwardKind::calculus);
    for (size_t i = 0; i < theta_hat.size(); ++i)
      for (std::int64_t k = 0; k < theta_hat[i].numel(); ++k)
        theta_hat[i][k] -= lr * std::sqrt(c[i]) * g_hat[i][k];

    for (size_t i = 0; i < theta_star.size(); ++i)
      for (std::int64_t k = 0; k < theta_star[i].numel(); ++k)
        worst = std::max(worst, std::fabs(theta_hat[i][k] -
                                          theta_star[i][k] / std::sqrt(c[i])));
  }
  return worst;
}

/// Under Adam with eps = 0, the scaled op and the unscaled op alpha . f give
/// identical trajectories from the same start (diagonal-rescaling
/// invariance). Returns the largest deviation. `allow_nonzero_eps` exists
/// only to demonstrate that the equivalence needs eps = 0.
inline double adam_equivalence_check(const ReparamProblem& p,
                                     const std::vector<Tensor>& theta0, int steps,
                                     const AdamConfig& base_cfg = {},
                                     bool allow_nonzero_eps = false) {
  AdamConfig cfg = base_cfg;
  if (cfg.eps != 0.0 && !allow_nonzero_eps)
    throw std::invalid_argument("adam_equivalence_check: the proposition needs eps = 0");

  std::vector<Tensor> theta_star = theta0;
  std::vector<Tensor> theta_hat = theta0;
  OptimState st_star = OptimState::for_params(theta0);
  OptimState st_hat = OptimState::for_params(theta0);

  double worst = 0.0;
  for (int t = 0; t < steps; ++t) {
    const std::vector<Tensor> data = p.data_at(t);
    const std::vector<Tensor> g_star =
        detail::problem_grads(p, theta_star, data, graph::BackwardKind::scaled);
    const std::vector<Tensor> g_hat =
        detail::problem_grads(p, theta_hat, data, graph::BackwardKind::calculus);
    adam_step(theta_star, g_star, st_star, cfg);
    adam_step(theta_hat, g_hat, st_hat, cfg);
    for (size_t i = 0; i < theta_star.size(); ++i)
      for (std::int64_t k = 0; k < theta_star[i].numel(); ++k)
        worst = std::max(worst, std::fabs(theta_hat[i][k] - theta_star[i][k]));
  }
  return worst;
}

/// FLOP cost of the rescaling multiplies relative to an unscaled model:
/// ops_per_matmul / (2 . hidden_size).
inline double flop_overhead(std::int64_t hidden_size, double ops_per_matmul) {
  if (hidden_size < 1 || ops_per_matmul < 0)
    throw std::invalid_argument("flop_overhead: bad arguments");
  return ops_per_matmul / (2.0 * static_cast<double>(hidden_size));
}

}  // namespace unitscale
