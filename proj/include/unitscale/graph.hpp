#pragma once
// Scaled computational graphs.
//
// A graph is a DAG of ops where every op carries a forward factor alpha and
// one backward factor beta per input. The backward pass multiplies each op's
// input gradient by its beta, so the graph computes correct gradients only up
// to constant per-input factors -- and only for factor assignments that keep
// those constants well defined. `gradient_scale_ratios` decides that by
// propagating the rescaling function s(e) from the outputs: every op must see
// a single consistent s across its output edges, and each input edge picks up
// beta/alpha. Assignments produced by `resolve_constraints` (geometric-mean
// resolution over the non-cut-edge groups) always pass; `verify_scaled_op`
// checks the same property empirically against the true gradient of the
// computed forward function.
//
// Values with several consumers are materialised as an explicit copy node at
// freeze time; its backward is the (beta-scaled) sum of the incoming
// gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscale/float_format.hpp"
#include "unitscale/random.hpp"
#include "unitscale/tensor.hpp"

namespace unitscale::graph {

enum class OpKind {
  Copy,
  Identity,
  MatMul,
  Relu,
  Gelu,
  Tanh,
  Sigmoid,
  Square,
  Add,
  WeightedAdd,
  Sum,
  Softmax,
  SoftmaxXent,
  LayerNorm,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Copy: return "copy";
    case OpKind::Identity: return "identity";
    case OpKind::MatMul: return "matmul";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Square: return "square";
    case OpKind::Add: return "add";
    case OpKind::WeightedAdd: return "weighted_add";
    case OpKind::Sum: return "sum";
    case OpKind::Softmax: return "softmax";
    case OpKind::SoftmaxXent: return "softmax_xent";
    case OpKind::LayerNorm: return "layer_norm";
  }
  return "?";
}

inline OpKind op_from_name(const std::string& s) {
  for (OpKind k : {OpKind::Copy, OpKind::Identity, OpKind::MatMul, OpKind::Relu,
                   OpKind::Gelu, OpKind::Tanh, OpKind::Sigmoid, OpKind::Square,
                   OpKind::Add, OpKind::WeightedAdd, OpKind::Sum, OpKind::Softmax,
                   OpKind::SoftmaxXent, OpKind::LayerNorm})
    if (s == op_name(k)) return k;
  throw std::invalid_argument("unknown op '" + s + "'");
}

struct ScaleFactors {
  double alpha = 1.0;
  std::vector<double> betas;  // one per op input

  static ScaleFactors unit(int arity) {
    return {1.0, std::vector<double>(static_cast<size_t>(arity), 1.0)};
  }
  void check(int arity) const {
    if (static_cast<int>(betas.size()) != arity)
      throw std::invalid_argument("scale factors: beta count != op arity");
    if (alpha <= 0.0) throw std::invalid_argument("scale factors must be positive");
    for (double b : betas)
      if (b <= 0.0) throw std::invalid_argument("scale factors must be positive");
  }
};

struct NodeAttrs {
  std::vector<double> gammas;  // WeightedAdd weights
  int fanout = 1;              // Copy output count
  // Deliberate factor choices (identity rewrites, loss scaling) that
  // geometric-mean constraint resolution must leave untouched.
  bool pin_factors = false;
};

struct Node {
  OpKind kind;
  ScaleFactors scale;
  NodeAttrs attrs;
  std::vector<int> in_edges;   // edge id per input slot
  std::vector<int> out_edges;  // edge id per output port
};

enum class InputKind { data, parameter };

struct Edge {
  int id = -1;
  int from_node = -1;  // -1: graph input (from_port = input index)
  int from_port = 0;
  int to_node = -1;  // -1: graph output (to_slot = output index)
  int to_slot = 0;
  Shape shape;
};

inline int op_arity(OpKind k, const NodeAttrs& attrs) {
  switch (k) {
    case OpKind::MatMul:
    case OpKind::Add:
    case OpKind::SoftmaxXent: return 2;
    case OpKind::LayerNorm: return 3;
    case OpKind::WeightedAdd: return static_cast<int>(attrs.gammas.size());
    default: return 1;
  }
}

inline int op_outputs(OpKind k, const NodeAttrs& attrs) {
  return k == OpKind::Copy ? attrs.fanout : 1;
}

inline Shape infer_shape(OpKind k, const std::vector<Shape>& in, const NodeAttrs& attrs) {
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(std::string(op_name(k)) + ": " + msg);
  };
  need(static_cast<int>(in.size()) == op_arity(k, attrs), "arity mismatch");
  switch (k) {
    case OpKind::MatMul:
      need(in[0].size() == 2 && in[1].size() == 2 && in[0][1] == in[1][0],
           "incompatible shapes " + shape_str(in[0]) + " and " + shape_str(in[1]));
      return {in[0][0], in[1][1]};
    case OpKind::Add:
      need(in[0] == in[1], "shape mismatch");
      return in[0];
    case OpKind::WeightedAdd:
      need(!attrs.gammas.empty(), "needs weights");
      for (const Shape& s : in) need(s == in[0], "shape mismatch");
      return in[0];
    case OpKind::Sum:
      return {};
    case OpKind::Softmax:
      need(!in[0].empty() && in[0].back() >= 2, "needs a last axis of size >= 2");
      return in[0];
    case OpKind::SoftmaxXent:
      if (in[0].size() == 2) {
        need(in[1].size() == 1 && in[1][0] == in[0][0], "targets must be [batch]");
        need(in[0][1] >= 2, "needs s >= 2 classes");
        return {in[0][0]};
      }
      need(in[0].size() == 1 && in[1].empty(), "logits [s] need scalar target");
      need(in[0][0] >= 2, "needs s >= 2 classes");
      return {};
    case OpKind::LayerNorm:
      need(in[0].size() == 2 && in[0][1] >= 2, "x must be [b x n], n >= 2");
      need(in[1] == Shape{in[0][1]} && in[2] == Shape{in[0][1]}, "w, c must be [n]");
      return in[0];
    default:
      return in[0];
  }
}

// ---------------------------------------------------------------------------

class Graph {
 public:
  std::vector<Node> nodes;       // topologically ordered
  std::vector<Edge> edges;       // indexed by edge id
  std::vector<int> input_edges;  // edge id per graph input
  std::vector<InputKind> input_kinds;
  std::vector<int> output_edges;  // edge id per graph output

  int num_inputs() const { return static_cast<int>(input_edges.size()); }
  int num_outputs() const { return static_cast<int>(output_edges.size()); }

  const Shape& input_shape(int i) const { return edges[input_edges[i]].shape; }
  const Shape& output_shape(int j) const { return edges[output_edges[j]].shape; }
};

// ---------------------------------------------------------------------------
// Builder: values are producer slots; fan-out becomes a copy node at freeze.

class Builder {
 public:
  struct Value {
    int id = -1;
  };

  Value input(Shape shape, InputKind kind) {
    values_.push_back({-1, static_cast<int>(inputs_.size()), std::move(shape)});
    inputs_.push_back(kind);
    return {static_cast<int>(values_.size()) - 1};
  }

  Value apply(OpKind kind, const std::vector<Value>& ins,
              std::optional<ScaleFactors> scale = std::nullopt, NodeAttrs attrs = {}) {
    std::vector<Shape> in_shapes;
    for (Value v : ins) in_shapes.push_back(value_shape(v));
    Shape out = infer_shape(kind, in_shapes, attrs);
    ScaleFactors sf = scale ? *scale : ScaleFactors::unit(op_arity(kind, attrs));
    sf.check(op_arity(kind, attrs));

    PendingNode n;
    n.kind = kind;
    n.scale = std::move(sf);
    n.attrs = std::move(attrs);
    for (Value v : ins) n.ins.push_back(v.id);
    pending_.push_back(std::move(n));
    values_.push_back({static_cast<int>(pending_.size()) - 1, 0, std::move(out)});
    return {static_cast<int>(values_.size()) - 1};
  }

  /// Marking the same value twice is idempotent.
  void output(Value v) {
    value_shape(v);  // validates the handle
    if (std::find(outputs_.begin(), outputs_.end(), v.id) == outputs_.end())
      outputs_.push_back(v.id);
  }

  const Shape& value_shape(Value v) const {
    if (v.id < 0 || v.id >= static_cast<int>(values_.size()))
      throw std::invalid_argument("builder: value does not belong to this graph");
    return values_[v.id].shape;
  }

  /// Materialise the graph. When `value_edge` is given, it receives for each
  /// builder value the edge carrying that value (the copy-node input edge on
  /// fan-out), which is where its forward value and total gradient live.
  Graph freeze(std::map<int, int>* value_edge = nullptr) const {
    if (outputs_.empty()) throw std::logic_error("freeze: graph has no outputs");

    // Consumers per value: (pending op index, slot) plus (-1, output index).
    std::vector<std::vector<std::pair<int, int>>> consumers(values_.size());
    for (size_t n = 0; n < pending_.size(); ++n)
      for (size_t s = 0; s < pending_[n].ins.size(); ++s)
        consumers[pending_[n].ins[s]].push_back({static_cast<int>(n), static_cast<int>(s)});
    for (size_t j = 0; j < outputs_.size(); ++j)
      consumers[outputs_[j]].push_back({-1, static_cast<int>(j)});

    Graph g;
    g.input_kinds = inputs_;
    g.input_edges.resize(inputs_.size(), -1);
    g.output_edges.resize(outputs_.size(), -1);
    std::map<std::pair<int, int>, int> use_edge;  // (pending idx, slot) -> edge id

    auto make_edge = [&g](int from_node, int from_port, const Shape& shape) {
      Edge e;
      e.id = static_cast<int>(g.edges.size());
      e.from_node = from_node;
      e.from_port = from_port;
      e.shape = shape;
      g.edges.push_back(e);
      return e.id;
    };

    // Emit the edges for one produced value, inserting a copy node on fan-out,
    // and record which edge each consumer will pick up.
    auto emit_value = [&](int value_id, int from_node, int from_port) {
      const auto& cons = consumers[value_id];
      const Shape& shape = values_[value_id].shape;
      if (cons.empty())
        throw std::logic_error("freeze: value is neither consumed nor marked as output");
      std::vector<int> eids;
      if (cons.size() == 1) {
        eids.push_back(make_edge(from_node, from_port, shape));
        if (from_node < 0) g.input_edges[from_port] = eids[0];
        if (value_edge) (*value_edge)[value_id] = eids[0];
      } else {
        Node copy;
        copy.kind = OpKind::Copy;
        copy.attrs.fanout = static_cast<int>(cons.size());
        copy.scale = ScaleFactors::unit(1);
        const int copy_id = static_cast<int>(g.nodes.size());
        const int in_eid = make_edge(from_node, from_port, shape);
        if (from_node < 0) g.input_edges[from_port] = in_eid;
        if (value_edge) (*value_edge)[value_id] = in_eid;
        g.edges[in_eid].to_node = copy_id;
        g.edges[in_eid].to_slot = 0;
        copy.in_edges.push_back(in_eid);
        for (size_t p = 0; p < cons.size(); ++p) {
          const int eid = make_edge(copy_id, static_cast<int>(p), shape);
          copy.out_edges.push_back(eid);
          eids.push_back(eid);
        }
        g.nodes.push_back(std::move(copy));
      }
      for (size_t ci = 0; ci < cons.size(); ++ci) {
        auto [cn, cs] = cons[ci];
        if (cn < 0) {
          g.edges[eids[ci]].to_node = -1;
          g.edges[eids[ci]].to_slot = cs;
          g.output_edges[cs] = eids[ci];
        } else {
          use_edge[{cn, cs}] = eids[ci];
        }
      }
    };

    // Graph inputs, then ops in construction (= topological) order.
    for (size_t v = 0; v < values_.size(); ++v)
      if (values_[v].producer < 0) emit_value(static_cast<int>(v), -1, values_[v].port);
    for (size_t p = 0; p < pending_.size(); ++p) {
      const PendingNode& pn = pending_[p];
      Node node;
      node.kind = pn.kind;
      node.scale = pn.scale;
      node.attrs = pn.attrs;
      const int node_id = static_cast<int>(g.nodes.size());
      for (size_t s = 0; s < pn.ins.size(); ++s) {
        const int eid = use_edge.at({static_cast<int>(p), static_cast<int>(s)});
        g.edges[eid].to_node = node_id;
        g.edges[eid].to_slot = static_cast<int>(s);
        node.in_edges.push_back(eid);
      }
      g.nodes.push_back(std::move(node));
      emit_value(value_of_pending(static_cast<int>(p)), node_id, 0);
    }
    for (const Edge& e : g.edges)
      if (e.from_node >= 0) {
        Node& n = g.nodes[e.from_node];
        if (static_cast<int>(n.out_edges.size()) <= e.from_port)
          n.out_edges.resize(e.from_port + 1, -1);
        n.out_edges[e.from_port] = e.id;
      }
    return g;
  }

 private:
  struct PendingNode {
    OpKind kind;
    ScaleFactors scale;
    NodeAttrs attrs;
    std::vector<int> ins;  // value ids
  };
  struct ValueRec {
    int producer;  // pending node index, or -1 for graph input
    int port;      // input index when producer < 0
    Shape shape;
  };

  int value_of_pending(int pending_idx) const {
    for (size_t v = 0; v < values_.size(); ++v)
      if (values_[v].producer == pending_idx) return static_cast<int>(v);
    throw std::logic_error("freeze: missing value record");
  }

  std::vector<PendingNode> pending_;
  std::vector<ValueRec> values_;
  std::vector<InputKind> inputs_;
  std::vector<int> outputs_;  // value ids
};

// ---------------------------------------------------------------------------
// Execution

/// Forward values z(e) and backward values h(e), one per edge. Quantized
/// matmul inputs are stashed so the backward matmuls see the same values the
/// forward pass used.
struct BackwardTape {
  std::vector<Tensor> z;
  std::vector<Tensor> h;
  std::map<int, std::pair<Tensor, Tensor>> matmul_quantized;  // node id -> (X, W)
  bool nonfinite_forward = false;
};

/// Quantization applied to matmul inputs only. `data_format` covers
/// activations and weights in the forward pass, `grad_format` the incoming
/// gradients of the backward matmuls.
struct MatmulPrecision {
  const FloatFormat* data_format = nullptr;
  const FloatFormat* grad_format = nullptr;
};

enum class BackwardKind {
  scaled,    // multiply input-i gradients by beta_i (the scaled op)
  calculus,  // multiply by alpha: the true gradient of the computed forward
};

namespace detail {

inline void check_target(double t, std::int64_t s) {
  const std::int64_t ti = static_cast<std::int64_t>(t);
  if (ti < 0 || ti >= s || static_cast<double>(ti) != t)
    throw std::invalid_argument("softmax_xent: target index out of range");
}

inline Tensor node_forward(const Node& n, const std::vector<const Tensor*>& x,
                           const MatmulPrecision* prec, BackwardTape* tape, int node_id) {
  const double a = n.scale.alpha;
  switch (n.kind) {
    case OpKind::Copy:
    case OpKind::Identity:
      return scale(*x[0], a);
    case OpKind::MatMul: {
      Tensor xx = *x[0], ww = *x[1];
      if (prec && prec->data_format) {
        xx = unitscale::quantize(xx, *prec->data_format);
        ww = unitscale::quantize(ww, *prec->data_format);
      }
      Tensor out = scale(matmul(xx, ww), a);
      if (tape && prec && prec->data_format)
        tape->matmul_quantized[node_id] = {std::move(xx), std::move(ww)};
      return out;
    }
    case OpKind::Relu: return scale(relu(*x[0]), a);
    case OpKind::Gelu: return scale(gelu(*x[0]), a);
    case OpKind::Tanh: return scale(unitscale::tanh(*x[0]), a);
    case OpKind::Sigmoid: return scale(sigmoid(*x[0]), a);
    case OpKind::Square: return scale(mul(*x[0], *x[0]), a);
    case OpKind::Add: return scale(add(*x[0], *x[1]), a);
    case OpKind::WeightedAdd: {
      Tensor out(x[0]->shape());
      for (size_t i = 0; i < n.attrs.gammas.size(); ++i)
        for (std::int64_t k = 0; k < out.numel(); ++k)
          out[k] += n.attrs.gammas[i] * (*x[i])[k];
      return scale(out, a);
    }
    case OpKind::Sum: return scale(sum(*x[0]), a);
    case OpKind::Softmax: return scale(softmax_lastaxis(*x[0]), a);
    case OpKind::SoftmaxXent: {
      const Tensor& logits = *x[0];
      const Tensor& targets = *x[1];
      const std::int64_t s = logits.shape().back();
      const std::int64_t rows = logits.numel() / s;
      Tensor p = softmax_lastaxis(logits);
      Tensor loss(targets.shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        check_target(targets[r], s);
        const std::int64_t t = static_cast<std::int64_t>(targets[r]);
        loss[r] = -std::log(p[r * s + t]);
      }
      return scale(loss, a);
    }
    case OpKind::LayerNorm: {
      const Tensor& xx = *x[0];
      const Tensor& w = *x[1];
      const Tensor& c = *x[2];
      const std::int64_t b = xx.dim(0), nn = xx.dim(1);
      Tensor out(xx.shape());
      for (std::int64_t r = 0; r < b; ++r) {
        double mu = 0.0, m2 = 0.0;
        for (std::int64_t j = 0; j < nn; ++j) mu += xx[r * nn + j];
        mu /= static_cast<double>(nn);
        for (std::int64_t j = 0; j < nn; ++j) {
          const double d = xx[r * nn + j] - mu;
          m2 += d * d;
        }
        const double sd = std::sqrt(m2 / static_cast<double>(nn));
        if (sd == 0.0) throw std::domain_error("layer_norm: degenerate row (sigma = 0)");
        for (std::int64_t j = 0; j < nn; ++j)
          out[r * nn + j] = a * (c[j] + w[j] * (xx[r * nn + j] - mu) / sd);
      }
      return out;
    }
  }
  throw std::logic_error("node_forward: unhandled op");
}

/// Vector-Jacobian products of the unscaled op, one tensor per input slot.
inline std::vector<Tensor> node_vjp(const Node& n, const std::vector<const Tensor*>& x,
                                    const std::vector<const Tensor*>& gout,
                                    const MatmulPrecision* prec, const BackwardTape& tape,
                                    int node_id) {
  switch (n.kind) {
    case OpKind::Copy: {
      Tensor g(x[0]->shape());
      for (const Tensor* go : gout)
        for (std::int64_t k = 0; k < g.numel(); ++k) g[k] += (*go)[k];
      return {std::move(g)};
    }
    case OpKind::Identity: return {*gout[0]};
    case OpKind::MatMul: {
      const Tensor* xx = x[0];
      const Tensor* ww = x[1];
      Tensor gq = *gout[0];
      if (prec && prec->data_format) {
        const auto& q = tape.matmul_quantized.at(node_id);
        xx = &q.first;
        ww = &q.second;
      }
      if (prec && prec->grad_format) gq = unitscale::quantize(gq, *prec->grad_format);
      return {matmul_transpose_b(gq, *ww), matmul_transpose_a(*xx, gq)};
    }
    case OpKind::Relu: {
      Tensor g(x[0]->shape());
      for (std::int64_t k = 0; k < g.numel(); ++k)
        g[k] = relu_grad_fn((*x[0])[k]) * (*gout[0])[k];
      return {std::move(g)};
    }
    case OpKind::Gelu: {
      Tensor g(x[0]->shape());
      for (std::int64_t k = 0; k < g.numel(); ++k)
        g[k] = gelu_grad_fn((*x[0])[k]) * (*gout[0])[k];
      return {std::move(g)};
    }
    case OpKind::Tanh: {
      Tensor g(x[0]->shape());
      for (std::int64_t k = 0; k < g.numel(); ++k)
        g[k] = tanh_grad_fn((*x[0])[k]) * (*gout[0])[k];
      return {std::move(g)};
    }
    case OpKind::Sigmoid: {
      Tensor g(x[0]->shape());
      for (std::int64_t k = 0; k < g.numel(); ++k)
        g[k] = sigmoid_grad_fn((*x[0])[k]) * (*gout[0])[k];
      return {std::move(g)};
    }
    case OpKind::Square: {
      Tensor g(x[0]->shape());
      for (std::int64_t k = 0; k < g.numel(); ++k)
        g[k] = 2.0 * (*x[0])[k] * (*gout[0])[k];
      return {std::move(g)};
    }
    case OpKind::Add: return {*gout[0], *gout[0]};
    case OpKind::WeightedAdd: {
      std::vector<Tensor> gs;
      for (double gamma : n.attrs.gammas) gs.push_back(scale(*gout[0], gamma));
      return gs;
    }
    case OpKind::Sum: return {full(x[0]->shape(), gout[0]->value())};
    case OpKind::Softmax: {
      Tensor y = softmax_lastaxis(*x[0]);
      const std::int64_t s = y.shape().back();
      const std::int64_t rows = y.numel() / s;
      Tensor g(y.shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < s; ++j) dot += (*gout[0])[r * s + j] * y[r * s + j];
        for (std::int64_t j = 0; j < s; ++j)
          g[r * s + j] = y[r * s + j] * ((*gout[0])[r * s + j] - dot);
      }
      return {std::move(g)};
    }
    case OpKind::SoftmaxXent: {
      const Tensor& logits = *x[0];
      const Tensor& targets = *x[1];
      const std::int64_t s = logits.shape().back();
      const std::int64_t rows = logits.numel() / s;
      Tensor p = softmax_lastaxis(logits);
      Tensor g(logits.shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t t = static_cast<std::int64_t>(targets[r]);
        const double gr = (*gout[0])[r];
        for (std::int64_t j = 0; j < s; ++j)
          g[r * s + j] = gr * (p[r * s + j] - (j == t ? 1.0 : 0.0));
      }
      return {std::move(g), zeros(targets.shape())};
    }
    case OpKind::LayerNorm: {
      const Tensor& xx = *x[0];
      const Tensor& w = *x[1];
      const std::int64_t b = xx.dim(0), nn = xx.dim(1);
      Tensor gx(xx.shape()), gw({nn}), gc({nn});
      for (std::int64_t r = 0; r < b; ++r) {
        double mu = 0.0, m2 = 0.0;
        for (std::int64_t j = 0; j < nn; ++j) mu += xx[r * nn + j];
        mu /= static_cast<double>(nn);
        for (std::int64_t j = 0; j < nn; ++j) {
          const double d = xx[r * nn + j] - mu;
          m2 += d * d;
        }
        const double sd = std::sqrt(m2 / static_cast<double>(nn));
        if (sd == 0.0) throw std::domain_error("layer_norm: degenerate row (sigma = 0)");
        double mean_gy = 0.0, mean_gyx = 0.0;
        for (std::int64_t j = 0; j < nn; ++j) {
          const double xh = (xx[r * nn + j] - mu) / sd;
          const double gy = w[j] * (*gout[0])[r * nn + j];
          mean_gy += gy;
          mean_gyx += gy * xh;
          gw[j] += (*gout[0])[r * nn + j] * xh;
          gc[j] += (*gout[0])[r * nn + j];
        }
        mean_gy /= static_cast<double>(nn);
        mean_gyx /= static_cast<double>(nn);
        for (std::int64_t j = 0; j < nn; ++j) {
          const double xh = (xx[r * nn + j] - mu) / sd;
          const double gy = w[j] * (*gout[0])[r * nn + j];
          gx[r * nn + j] = (gy - mean_gy - xh * mean_gyx) / sd;
        }
      }
      return {std::move(gx), std::move(gw), std::move(gc)};
    }
  }
  throw std::logic_error("node_vjp: unhandled op");
}

}  // namespace detail

/// Evaluate the graph. Returns one tensor per marked output and fills the
/// tape's forward values. Non-finite values may propagate (needed for
/// overflow experiments); the tape flags them.
inline std::vector<Tensor> forward(const Graph& g, const std::vector<Tensor>& inputs,
                                   BackwardTape* tape = nullptr,
                                   const MatmulPrecision* prec = nullptr) {
  if (g.num_outputs() == 0) throw std::logic_error("forward: graph has no outputs");
  if (static_cast<int>(inputs.size()) != g.num_inputs())
    throw std::invalid_argument("forward: expected " + std::to_string(g.num_inputs()) +
                                " inputs, got " + std::to_string(inputs.size()));
  for (int i = 0; i < g.num_inputs(); ++i)
    if (inputs[i].shape() != g.input_shape(i))
      throw std::invalid_argument("forward: input " + std::to_string(i) + " has shape " +
                                  shape_str(inputs[i].shape()) + ", expected " +
                                  shape_str(g.input_shape(i)));

  std::vector<Tensor> z(g.edges.size());
  for (int i = 0; i < g.num_inputs(); ++i) z[g.input_edges[i]] = inputs[i];

  bool nonfinite = false;
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    const Node& n = g.nodes[v];
    std::vector<const Tensor*> x;
    for (int e : n.in_edges) x.push_back(&z[e]);
    if (n.kind == OpKind::Copy) {
      Tensor out = detail::node_forward(n, x, prec, tape, static_cast<int>(v));
      for (size_t p = 1; p < n.out_edges.size(); ++p) z[n.out_edges[p]] = out;
      z[n.out_edges[0]] = std::move(out);
    } else {
      z[n.out_edges[0]] = detail::node_forward(n, x, prec, tape, static_cast<int>(v));
    }
    if (!all_finite(z[n.out_edges[0]])) nonfinite = true;
  }

  std::vector<Tensor> outs;
  for (int j = 0; j < g.num_outputs(); ++j) outs.push_back(z[g.output_edges[j]]);
  if (tape) {
    tape->z = std::move(z);
    tape->nonfinite_forward = nonfinite;
  }
  return outs;
}

/// Reverse pass over a tape from a matching forward call. Returns one
/// gradient per graph input; `kind` selects the scaled backward (beta
/// factors) or the true gradient of the computed forward (alpha factors).
inline std::vector<Tensor> backward(const Graph& g, BackwardTape& tape,
                                    const std::vector<Tensor>& output_grads,
                                    BackwardKind kind = BackwardKind::scaled,
                                    const MatmulPrecision* prec = nullptr) {
  if (tape.z.size() != g.edges.size())
    throw std::invalid_argument("backward: tape does not match graph");
  if (static_cast<int>(output_grads.size()) != g.num_outputs())
    throw std::invalid_argument("backward: need one gradient per output");
  for (int j = 0; j < g.num_outputs(); ++j)
    if (output_grads[j].shape() != g.output_shape(j))
      throw std::invalid_argument("backward: output grad " + std::to_string(j) +
                                  " shape mismatch");

  tape.h.assign(g.edges.size(), Tensor());
  for (int j = 0; j < g.num_outputs(); ++j) tape.h[g.output_edges[j]] = output_grads[j];

  for (size_t vi = g.nodes.size(); vi-- > 0;) {
    const Node& n = g.nodes[vi];
    std::vector<const Tensor*> x;
    for (int e : n.in_edges) x.push_back(&tape.z[e]);
    std::vector<const Tensor*> gout;
    for (int e : n.out_edges) {
      if (tape.h[e].numel() == 0)  // unreached output edge: zero gradient
        tape.h[e] = zeros(g.edges[e].shape);
      gout.push_back(&tape.h[e]);
    }
    std::vector<Tensor> gin =
        detail::node_vjp(n, x, gout, prec, tape, static_cast<int>(vi));
    for (size_t s = 0; s < gin.size(); ++s) {
      const double f = kind == BackwardKind::scaled ? n.scale.betas[s] : n.scale.alpha;
      tape.h[n.in_edges[s]] = scale(gin[s], f);
    }
  }

  std::vector<Tensor> grads;
  for (int i = 0; i < g.num_inputs(); ++i) {
    Tensor& h = tape.h[g.input_edges[i]];
    if (h.numel() == 0) h = zeros(g.input_shape(i));  // input not reachable from outputs
    grads.push_back(h);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Cut edges (bridges of the undirected graph, dummy input/output nodes
// included). Iterative lowlink search; vertices are visited in id order so
// reports are deterministic.

inline std::vector<int> find_cut_edges(const Graph& g) {
  const int n_nodes = static_cast<int>(g.nodes.size());
  const int n_vertices = n_nodes + g.num_inputs() + g.num_outputs();
  auto vertex_of = [&](const Edge& e, bool head) {
    if (head) return e.to_node >= 0 ? e.to_node : n_nodes + g.num_inputs() + e.to_slot;
    return e.from_node >= 0 ? e.from_node : n_nodes + e.from_port;
  };

  std::vector<std::vector<std::pair<int, int>>> adj(n_vertices);  // (neighbor, edge id)
  for (const Edge& e : g.edges) {
    const int u = vertex_of(e, false), v = vertex_of(e, true);
    adj[u].push_back({v, e.id});
    adj[v].push_back({u, e.id});
  }

  std::vector<int> disc(n_vertices, -1), low(n_vertices, 0);
  std::vector<int> bridges;
  int timer = 0;
  struct Frame {
    int v;
    int via_edge;
    size_t next;
  };
  for (int root = 0; root < n_vertices; ++root) {
    if (disc[root] >= 0) continue;
    std::vector<Frame> stack{{root, -1, 0}};
    disc[root] = low[root] = timer++;
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < adj[f.v].size()) {
        auto [w, eid] = adj[f.v][f.next++];
        if (eid == f.via_edge) continue;
        if (disc[w] < 0) {
          disc[w] = low[w] = timer++;
          stack.push_back({w, eid, 0});
        } else {
          low[f.v] = std::min(low[f.v], disc[w]);
        }
      } else {
        const int v = f.v, via = f.via_edge;
        stack.pop_back();
        if (!stack.empty()) {
          const int parent = stack.back().v;
          low[parent] = std::min(low[parent], low[v]);
          if (low[v] > disc[parent]) bridges.push_back(via);
        }
      }
    }
  }
  std::sort(bridges.begin(), bridges.end());
  return bridges;
}

// ---------------------------------------------------------------------------
// Constraint resolution

/// Factor address: (node id, slot); slot -1 addresses alpha.
using FactorMap = std::map<std::pair<int, int>, double>;

inline FactorMap factors_of(const Graph& g) {
  FactorMap m;
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    m[{static_cast<int>(v), -1}] = g.nodes[v].scale.alpha;
    for (size_t s = 0; s < g.nodes[v].scale.betas.size(); ++s)
      m[{static_cast<int>(v), static_cast<int>(s)}] = g.nodes[v].scale.betas[s];
  }
  return m;
}

inline Graph with_factors(const Graph& g, const FactorMap& f) {
  Graph out = g;
  for (const auto& [key, val] : f) {
    if (val <= 0.0) throw std::invalid_argument("with_factors: factors must be positive");
    Node& n = out.nodes.at(key.first);
    if (key.second < 0)
      n.scale.alpha = val;
    else
      n.scale.betas.at(key.second) = val;
  }
  return out;
}

/// Geometric-mean resolution: for every op, alpha and the betas of its
/// non-cut input edges form one group, replaced by the group's geometric
/// mean; factors on cut edges keep their proposals. `pinned_nodes` are left
/// untouched (used for the residual identity rewrite, whose factors cancel
/// pairwise instead of satisfying the local rule).
inline FactorMap resolve_constraints(const Graph& g, const FactorMap& proposals,
                                     const std::set<int>& pinned_nodes = {}) {
  FactorMap out = proposals;
  for (const auto& [key, val] : factors_of(g)) {
    auto it = out.find(key);
    if (it == out.end())
      throw std::invalid_argument("resolve_constraints: proposals must cover every factor");
    if (it->second <= 0.0)
      throw std::invalid_argument("resolve_constraints: proposals must be positive");
    (void)val;
  }
  const std::vector<int> cut = find_cut_edges(g);
  auto is_cut = [&cut](int eid) {
    return std::binary_search(cut.begin(), cut.end(), eid);
  };
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    if (pinned_nodes.count(static_cast<int>(v))) continue;
    std::vector<std::pair<int, int>> group{{static_cast<int>(v), -1}};
    for (size_t s = 0; s < g.nodes[v].in_edges.size(); ++s)
      if (!is_cut(g.nodes[v].in_edges[s]))
        group.push_back({static_cast<int>(v), static_cast<int>(s)});
    if (group.size() == 1) continue;
    double log_sum = 0.0;
    for (const auto& k : group) log_sum += std::log(proposals.at(k));
    const double gm = std::exp(log_sum / static_cast<double>(group.size()));
    for (const auto& k : group) out[k] = gm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// The rescaling function s(e): backward value = s * true gradient of the
// computed forward. Propagated from the outputs; every node must see one
// consistent value across its output edges, otherwise the graph is not a
// scaled op and no constant ratio exists.

inline std::vector<double> edge_scale_ratios(const Graph& g, double rel_tol = 1e-9) {
  std::vector<double> s(g.edges.size(), std::numeric_limits<double>::quiet_NaN());
  for (int j = 0; j < g.num_outputs(); ++j) s[g.output_edges[j]] = 1.0;
  for (size_t vi = g.nodes.size(); vi-- > 0;) {
    const Node& n = g.nodes[vi];
    double s_node = std::numeric_limits<double>::quiet_NaN();
    for (int e : n.out_edges) {
      if (std::isnan(s[e])) continue;
      if (std::isnan(s_node)) {
        s_node = s[e];
      } else if (std::fabs(s[e] - s_node) > rel_tol * std::fabs(s_node)) {
        throw std::runtime_error(
            std::string("graph is not a scaled op: node ") + std::to_string(vi) + " (" +
            op_name(n.kind) + ") sees inconsistent backward rescaling " +
            std::to_string(s_node) + " vs " + std::to_string(s[e]));
      }
    }
    if (std::isnan(s_node)) continue;  // node unreachable from any output
    for (size_t slot = 0; slot < n.in_edges.size(); ++slot)
      s[n.in_edges[slot]] = n.scale.betas[slot] / n.scale.alpha * s_node;
  }
  return s;
}

/// s(in_i, out): the constant by which the scaled backward multiplies the
/// true gradient of the computed forward, per graph input. Throws when the
/// factor assignment admits no such constants.
inline std::vector<double> gradient_scale_ratios(const Graph& g, double rel_tol = 1e-9) {
  const std::vector<double> s = edge_scale_ratios(g, rel_tol);
  std::vector<double> out;
  for (int i = 0; i < g.num_inputs(); ++i) out.push_back(s[g.input_edges[i]]);
  return out;
}

inline double gradient_scale_ratio(const Graph& g, int input_index, double rel_tol = 1e-9) {
  return gradient_scale_ratios(g, rel_tol).at(input_index);
}

/// True when the factor assignment admits constant per-input gradient
/// ratios (constraint-scaled assignments always do, and cancelling identity
/// pairs are accepted too).
inline bool is_valid_scaled_graph(const Graph& g, double rel_tol = 1e-9) {
  try {
    edge_scale_ratios(g, rel_tol);
    return true;
  } catch (const std::runtime_error&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Empirical scaled-op check

struct ScaledOpReport {
  bool is_scaled_op = false;
  std::vector<double> input_ratio;  // empirical c_i, NaN when no gradient flows
  double max_rel_dev = 0.0;
  int worst_input = -1;
};

/// Sample random inputs and output gradients and test whether the scaled
/// backward equals c_i times the true gradient of the computed forward, with
/// c_i constant across elements and trials.
inline ScaledOpReport verify_scaled_op(const Graph& g, int trials, std::uint64_t seed,
                                       double tol = 1e-6) {
  if (trials < 1) throw std::invalid_argument("verify_scaled_op: trials >= 1");
  ScaledOpReport rep;
  rep.input_ratio.assign(g.num_inputs(), std::numeric_limits<double>::quiet_NaN());
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    std::vector<Tensor> inputs;
    for (int i = 0; i < g.num_inputs(); ++i)
      inputs.push_back(randn(g.input_shape(i), 1.0, rng.raw()));
    std::vector<Tensor> gouts;
    for (int j = 0; j < g.num_outputs(); ++j)
      gouts.push_back(randn(g.output_shape(j), 1.0, rng.raw()));

    BackwardTape tape;
    forward(g, inputs, &tape);
    const std::vector<Tensor> h_scaled = backward(g, tape, gouts, BackwardKind::scaled);
    const std::vector<Tensor> h_true = backward(g, tape, gouts, BackwardKind::calculus);

    for (int i = 0; i < g.num_inputs(); ++i) {
      double h_max = 0.0;
      for (std::int64_t k = 0; k < h_true[i].numel(); ++k)
        h_max = std::max(h_max, std::fabs(h_true[i][k]));
      if (h_max == 0.0) continue;
      const double thresh = 1e-9 * h_max;
      for (std::int64_t k = 0; k < h_true[i].numel(); ++k) {
        if (std::fabs(h_true[i][k]) <= thresh) continue;
        const double r = h_scaled[i][k] / h_true[i][k];
        if (std::isnan(rep.input_ratio[i])) rep.input_ratio[i] = r;
        const double dev = std::fabs(r - rep.input_ratio[i]) /
                           std::max(std::fabs(rep.input_ratio[i]), 1e-300);
        if (dev > rep.max_rel_dev) {
          rep.max_rel_dev = dev;
          rep.worst_input = i;
        }
      }
    }
  }
  rep.is_scaled_op = rep.max_rel_dev <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// Central finite differences against the calculus backward on the scalar
/// phi(x) = sum_j w_j . f_j(x), with fixed unit-normal weights w_j.
/// Returns the largest relative deviation over all input elements.
inline double gradcheck(const Graph& g, const std::vector<Tensor>& point, double eps,
                        std::uint64_t seed = 17) {
  Rng rng(seed);
  std::vector<Tensor> w;
  for (int j = 0; j < g.num_outputs(); ++j)
    w.push_back(randn(g.output_shape(j), 1.0, rng.raw()));

  auto phi = [&](const std::vector<Tensor>& x) {
    const std::vector<Tensor> outs = forward(g, x);
    double acc = 0.0;
    for (int j = 0; j < g.num_outputs(); ++j)
      for (std::int64_t k = 0; k < outs[j].numel(); ++k) acc += w[j][k] * outs[j][k];
    return acc;
  };

  BackwardTape tape;
  forward(g, point, &tape);
  const std::vector<Tensor> analytic = backward(g, tape, w, BackwardKind::calculus);

  double worst = 0.0;
  std::vector<Tensor> x = point;
  for (int i = 0; i < g.num_inputs(); ++i) {
    for (std::int64_t k = 0; k < x[i].numel(); ++k) {
      const double orig = x[i][k];
      x[i][k] = orig + eps;
      const double up = phi(x);
      x[i][k] = orig - eps;
      const double down = phi(x);
      x[i][k] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double an = analytic[i][k];
      const double dev = std::fabs(fd - an) / std::max(std::fabs(fd) + std::fabs(an), 1e-8);
      worst = std::max(worst, dev);
    }
  }
  return worst;
}

}  // namespace unitscale::graph
