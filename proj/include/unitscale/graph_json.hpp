#pragma once
// Graph description import/export as JSON, round-trippable through the CLI
// `verify` subcommand. The cut-edge list is included as an annotation and
// recomputed on import.

#include <json.hpp>

#include <string>
#include <vector>

#include "unitscale/graph.hpp"

namespace unitscale::graph {

inline nlohmann::json to_json(const Graph& g) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    const Node& n = g.nodes[v];
    nlohmann::json jn;
    jn["id"] = v;
    jn["op"] = op_name(n.kind);
    jn["alpha"] = n.scale.alpha;
    jn["betas"] = n.scale.betas;
    if (!n.attrs.gammas.empty()) jn["gammas"] = n.attrs.gammas;
    if (n.kind == OpKind::Copy) jn["fanout"] = n.attrs.fanout;
    if (n.attrs.pin_factors) jn["pin_factors"] = true;
    j["nodes"].push_back(jn);
  }
  j["edges"] = nlohmann::json::array();
  for (const Edge& e : g.edges) {
    nlohmann::json je;
    je["id"] = e.id;
    je["from"] = {e.from_node, e.from_port};
    je["to"] = {e.to_node, e.to_slot};
    je["shape"] = e.shape;
    j["edges"].push_back(je);
  }
  j["inputs"] = nlohmann::json::array();
  for (int i = 0; i < g.num_inputs(); ++i)
    j["inputs"].push_back({{"edge", g.input_edges[i]},
                           {"kind", g.input_kinds[i] == InputKind::parameter
                                        ? "parameter"
                                        : "data"}});
  j["outputs"] = g.output_edges;
  j["cut_edges"] = find_cut_edges(g);
  return j;
}

inline Graph graph_from_json(const nlohmann::json& j) {
  Graph g;
  for (const auto& jn : j.at("nodes")) {
    Node n;
    n.kind = op_from_name(jn.at("op").get<std::string>());
    n.scale.alpha = jn.at("alpha").get<double>();
    n.scale.betas = jn.at("betas").get<std::vector<double>>();
    if (jn.contains("gammas")) n.attrs.gammas = jn.at("gammas").get<std::vector<double>>();
    if (jn.contains("fanout")) n.attrs.fanout = jn.at("fanout").get<int>();
    if (jn.contains("pin_factors")) n.attrs.pin_factors = jn.at("pin_factors").get<bool>();
    g.nodes.push_back(std::move(n));
  }
  for (const auto& je : j.at("edges")) {
    Edge e;
    e.id = je.at("id").get<int>();
    e.from_node = je.at("from").at(0).get<int>();
    e.from_port = je.at("from").at(1).get<int>();
    e.to_node = je.at("to").at(0).get<int>();
    e.to_slot = je.at("to").at(1).get<int>();
    e.shape = je.at("shape").get<Shape>();
    if (e.id != static_cast<int>(g.edges.size()))
      throw std::invalid_argument("graph json: edge ids must be dense and ordered");
    g.edges.push_back(std::move(e));
  }
  for (const auto& ji : j.at("inputs")) {
    g.input_edges.push_back(ji.at("edge").get<int>());
    g.input_kinds.push_back(ji.at("kind").get<std::string>() == "parameter"
                                ? InputKind::parameter
                                : InputKind::data);
  }
  g.output_edges = j.at("outputs").get<std::vector<int>>();

  // Rebuild node wiring from the edge table and validate the structure.
  for (Node& n : g.nodes) {
    n.in_edges.clear();
    n.out_edges.clear();
  }
  for (const Edge& e : g.edges) {
    if (e.from_node >= static_cast<int>(g.nodes.size()) ||
        e.to_node >= static_cast<int>(g.nodes.size()))
      throw std::invalid_argument("graph json: edge references missing node");
    if (e.to_node >= 0) {
      Node& n = g.nodes[e.to_node];
      if (static_cast<int>(n.in_edges.size()) <= e.to_slot)
        n.in_edges.resize(e.to_slot + 1, -1);
      n.in_edges[e.to_slot] = e.id;
    }
    if (e.from_node >= 0) {
      Node& n = g.nodes[e.from_node];
      if (static_cast<int>(n.out_edges.size()) <= e.from_port)
        n.out_edges.resize(e.from_port + 1, -1);
      n.out_edges[e.from_port] = e.id;
    }
  }
  for (size_t v = 0; v < g.nodes.size(); ++v) {
    Node& n = g.nodes[v];
    const int arity = op_arity(n.kind, n.attrs);
    if (static_cast<int>(n.in_edges.size()) != arity)
      throw std::invalid_argument("graph json: node " + std::to_string(v) +
                                  " is missing input edges");
    for (int e : n.in_edges)
      if (e < 0) throw std::invalid_argument("graph json: node input slot unset");
    if (static_cast<int>(n.out_edges.size()) != op_outputs(n.kind, n.attrs))
      throw std::invalid_argument("graph json: node " + std::to_string(v) +
                                  " has wrong output count");
    n.scale.check(arity);
    // Shape consistency: recompute and compare.
    std::vector<Shape> in_shapes;
    for (int e : n.in_edges) in_shapes.push_back(g.edges[e].shape);
    const Shape expect = infer_shape(n.kind, in_shapes, n.attrs);
    for (int e : n.out_edges)
      if (g.edges[e].shape != expect)
        throw std::invalid_argument("graph json: node " + std::to_string(v) +
                                    " output shape mismatch");
    for (int e : n.in_edges)
      if (g.edges[e].to_node >= 0 && e >= 0 && g.edges[e].to_node != static_cast<int>(v))
        throw std::invalid_argument("graph json: inconsistent edge wiring");
  }
  return g;
}

}  // namespace unitscale::graph
