#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"
#include "unitscale/graph_json.hpp"

using namespace unitscale;
using graph::Graph;

TEST_CASE("graph json round trip preserves behaviour", "[property]") {
  for (std::uint64_t seed = 40; seed < 52; ++seed) {
    const Graph g = test_support::random_constraint_scaled_dag(seed, 7, 3);
    const nlohmann::json j = graph::to_json(g);
    const Graph g2 = graph::graph_from_json(j);
    CAPTURE(seed);

    REQUIRE(g2.nodes.size() == g.nodes.size());
    REQUIRE(g2.edges.size() == g.edges.size());

    std::vector<Tensor> inputs;
    for (int i = 0; i < g.num_inputs(); ++i)
      inputs.push_back(randn(g.input_shape(i), 1.0, seed * 3 + i));
    graph::BackwardTape t1, t2;
    const auto o1 = graph::forward(g, inputs, &t1);
    const auto o2 = graph::forward(g2, inputs, &t2);
    for (int j2 = 0; j2 < g.num_outputs(); ++j2)
      REQUIRE(o1[j2].data() == o2[j2].data());

    std::vector<Tensor> gouts;
    for (int j2 = 0; j2 < g.num_outputs(); ++j2)
      gouts.push_back(randn(g.output_shape(j2), 1.0, seed * 5 + j2));
    const auto h1 = graph::backward(g, t1, gouts);
    const auto h2 = graph::backward(g2, t2, gouts);
    for (int i = 0; i < g.num_inputs(); ++i) REQUIRE(h1[i].data() == h2[i].data());

    // The cut-edge annotation matches a fresh computation.
    REQUIRE(j.at("cut_edges").get<std::vector<int>>() == graph::find_cut_edges(g2));
  }
}

TEST_CASE("graph json validation") {
  const Graph g = test_support::random_constraint_scaled_dag(1, 5, 3);
  nlohmann::json j = graph::to_json(g);
  SECTION("missing fields") {
    j.erase("edges");
    CHECK_THROWS(graph::graph_from_json(j));
  }
  SECTION("bad op name") {
    j["nodes"][0]["op"] = "conv3d";
    CHECK_THROWS(graph::graph_from_json(j));
  }
  SECTION("non-positive factor") {
    j["nodes"][0]["alpha"] = -1.0;
    CHECK_THROWS(graph::graph_from_json(j));
  }
  SECTION("shape mismatch") {
    j["edges"][0]["shape"] = {2, 2, 2};
    CHECK_THROWS(graph::graph_from_json(j));
  }
}
