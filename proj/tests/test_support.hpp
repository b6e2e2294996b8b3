#pragma once
// Shared helpers for the test suites: random constraint-scaled DAGs, the
// non-scaled-op counterexample, and a brute-force bridge oracle.

#include <cstdint>
#include <set>
#include <vector>

#include "unitscale/graph.hpp"
#include "unitscale/ops.hpp"
#include "unitscale/random.hpp"

namespace test_support {

using namespace unitscale;
using graph::Builder;
using graph::Graph;
using graph::OpKind;
using graph::ScaleFactors;

inline double rand_factor(Rng& rng) { return std::exp(rng.uniform() * 2.0 - 1.0); }

/// Random DAG over square tensors mixing matmul/relu/add/identity, with
/// random positive factors. Fan-out happens naturally when an op picks an
/// already-used value. Unused values are folded into the output through adds
/// so the graph is total.
inline Graph random_dag(std::uint64_t seed, int max_ops = 8, std::int64_t side = 4,
                        int num_inputs = 2) {
  Rng rng(seed);
  Builder b;
  std::vector<Builder::Value> pool;
  for (int i = 0; i < num_inputs; ++i)
    pool.push_back(b.input({side, side}, i == 0 ? graph::InputKind::data
                                                : graph::InputKind::parameter));
  std::set<int> used;
  auto pick = [&]() {
    const int i = static_cast<int>(rng.below(pool.size()));
    used.insert(pool[i].id);
    return pool[i];
  };
  auto factors = [&](int arity) {
    ScaleFactors f;
    f.alpha = rand_factor(rng);
    for (int i = 0; i < arity; ++i) f.betas.push_back(rand_factor(rng));
    return f;
  };
  const int ops = 1 + static_cast<int>(rng.below(max_ops));
  for (int i = 0; i < ops; ++i) {
    switch (rng.below(4)) {
      case 0: pool.push_back(b.apply(OpKind::MatMul, {pick(), pick()}, factors(2))); break;
      case 1: pool.push_back(b.apply(OpKind::Relu, {pick()}, factors(1))); break;
      case 2: pool.push_back(b.apply(OpKind::Add, {pick(), pick()}, factors(2))); break;
      default: pool.push_back(b.apply(OpKind::Identity, {pick()}, factors(1))); break;
    }
  }
  // Fold every unused value into the output.
  Builder::Value out = pool.back();
  used.insert(out.id);
  for (const Builder::Value& v : pool)
    if (!used.count(v.id)) out = b.apply(OpKind::Add, {v, out}, factors(2));
  b.output(out);
  return b.freeze();
}

/// random_dag with its factors replaced by a geometric-mean-resolved
/// assignment over random proposals: a constraint-scaled graph.
inline Graph random_constraint_scaled_dag(std::uint64_t seed, int max_ops = 8,
                                          std::int64_t side = 4) {
  Graph g = random_dag(seed, max_ops, side);
  Rng rng(seed ^ 0xabcdef12345ull);
  graph::FactorMap proposals;
  for (const auto& [key, value] : graph::factors_of(g)) {
    (void)value;
    proposals[key] = rand_factor(rng);
  }
  return graph::with_factors(g, graph::resolve_constraints(g, proposals));
}

/// x + f*(x) with f(x) = x^2: not a scaled op whenever alpha != beta.
inline Graph square_counterexample(double alpha, double beta, std::int64_t n = 8) {
  Builder b;
  auto x = b.input({n}, graph::InputKind::data);
  auto fx = b.apply(OpKind::Square, {x}, ScaleFactors{alpha, {beta}});
  auto out = b.apply(OpKind::Add, {x, fx});
  b.output(out);
  return b.freeze();
}

/// Delete-one-edge-and-count-components bridge oracle.
inline std::vector<int> bridges_by_deletion(const Graph& g) {
  const int n_nodes = static_cast<int>(g.nodes.size());
  const int n_vertices = n_nodes + g.num_inputs() + g.num_outputs();
  auto vertex_of = [&](const graph::Edge& e, bool head) {
    if (head) return e.to_node >= 0 ? e.to_node : n_nodes + g.num_inputs() + e.to_slot;
    return e.from_node >= 0 ? e.from_node : n_nodes + e.from_port;
  };
  auto component_count = [&](int skip_edge) {
    std::vector<int> comp(n_vertices, -1);
    int count = 0;
    for (int start = 0; start < n_vertices; ++start) {
      if (comp[start] >= 0) continue;
      ++count;
      std::vector<int> stack{start};
      comp[start] = count;
      while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        for (const graph::Edge& e : g.edges) {
          if (e.id == skip_edge) continue;
          const int a = vertex_of(e, false), bb = vertex_of(e, true);
          if (a == v && comp[bb] < 0) {
            comp[bb] = count;
            stack.push_back(bb);
          } else if (bb == v && comp[a] < 0) {
            comp[a] = count;
            stack.push_back(a);
          }
        }
      }
    }
    return count;
  };
  const int base = component_count(-1);
  std::vector<int> bridges;
  for (const graph::Edge& e : g.edges)
    if (component_count(e.id) > base) bridges.push_back(e.id);
  return bridges;
}

}  // namespace test_support
