#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <retexo/graph.hpp>
#include <retexo/synth.hpp>

#include "test_util.hpp"

using namespace retexo;

namespace {

GraphBundle path_graph(std::size_t n, std::size_t dim = 2) {
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId v = 0; v + 1 < n; ++v) edges.emplace_back(v, v + 1);
  std::vector<float> x(n * dim);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i) * 0.25f;
  std::vector<std::int32_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int32_t>(i % 2);
  return make_bundle(n, dim, 2, edges, std::move(x), std::move(y));
}

}  // namespace

TEST(GraphBundle, SymmetrizesAndDropsSelfLoopsAndDuplicates) {
  std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {1, 0}, {2, 2}, {1, 2}, {0, 1}};
  auto g = make_bundle(3, 1, 2, edges, {0, 0, 0}, {0, 1, 0});
  EXPECT_EQ(g.dropped_self_loops, 1u);
  EXPECT_EQ(g.duplicate_edges, 2u);
  EXPECT_EQ(g.directed_edge_entries(), 4u);
  for (NodeId u = 0; u < 3; ++u)
    for (NodeId v = 0; v < 3; ++v) EXPECT_EQ(g.has_edge(u, v), g.has_edge(v, u));
  EXPECT_FALSE(g.has_edge(2, 2));
}

TEST(GraphBundle, RejectsBadInput) {
  std::vector<std::pair<NodeId, NodeId>> edges{{0, 5}};
  EXPECT_THROW(make_bundle(3, 1, 2, edges, {0, 0, 0}, {0, 1, 0}), DataError);
  EXPECT_THROW(make_bundle(3, 1, 2, {}, {0, 0}, {0, 1, 0}), DataError);
  EXPECT_THROW(make_bundle(3, 1, 2, {}, {0, 0, 0}, {0, 2, 0}), DataError);
}

TEST(GraphBundle, SingleNodeWithoutEdges) {
  auto g = make_bundle(1, 3, 1, {}, {1, 2, 3}, {0});
  EXPECT_EQ(g.degree(0), 0u);
  EXPECT_TRUE(g.neighbors(0).empty());
}

TEST(GraphBundle, SaveLoadRoundTrip) {
  test::TempDir dir;
  SynthSpec spec;
  spec.nodes = 10;
  spec.classes = 2;
  spec.feature_dim = 3;
  spec.avg_degree = 2;
  spec.seed = 4;
  auto g = synth_graph(spec);
  save_bundle(g, dir.path());
  auto back = load_bundle(dir.path());
  EXPECT_EQ(back.num_nodes, g.num_nodes);
  EXPECT_EQ(back.feature_dim, g.feature_dim);
  EXPECT_EQ(back.num_classes, g.num_classes);
  EXPECT_EQ(back.adjacency, g.adjacency);
  EXPECT_EQ(back.labels, g.labels);
  EXPECT_EQ(back.features, g.features);
}

TEST(GraphBundle, LoadReportsMissingFilesAndBadLabels) {
  test::TempDir dir;
  EXPECT_THROW(load_bundle(dir.path() / "absent"), DataError);
  save_bundle(path_graph(4), dir.path());
  {
    std::ofstream(dir.path() / "labels.tsv") << "0\n1\n0\n";  // one short
  }
  EXPECT_THROW(load_bundle(dir.path()), DataError);
}

TEST(GraphBundle, InducedSubgraphKeepsOnlyInternalEdges) {
  auto g = synth_graph(SynthSpec{.nodes = 60, .classes = 3, .homophily = 0.5, .feature_dim = 4, .avg_degree = 5});
  std::vector<NodeId> members{0, 3, 4, 9, 10, 11, 20, 33, 41, 59};
  auto sub = induced_subgraph(g, members);
  std::set<NodeId> in(members.begin(), members.end());
  std::size_t expected = 0;
  for (auto [u, v] : undirected_edges(g))
    if (in.count(u) && in.count(v)) ++expected;
  EXPECT_EQ(sub.directed_edge_entries(), 2 * expected);
  for (NodeId v = 0; v < sub.num_nodes; ++v)
    for (auto u : sub.neighbors(v)) {
      EXPECT_TRUE(in.count(u));
      EXPECT_TRUE(in.count(v));
    }
}

TEST(Split, TransductiveSizesAreFloored) {
  auto g = synth_graph(cora_like_spec());
  auto s = make_transductive_split(g, 0.1, 0.1, 3);
  EXPECT_EQ(s.train_ids.size(), 270u);
  EXPECT_EQ(s.val_ids.size(), 270u);
  EXPECT_EQ(s.test_ids.size(), 2168u);
  std::set<NodeId> all;
  for (const auto* ids : {&s.train_ids, &s.val_ids, &s.test_ids}) all.insert(ids->begin(), ids->end());
  EXPECT_EQ(all.size(), 2708u);
  EXPECT_EQ(s, make_transductive_split(g, 0.1, 0.1, 3));
  EXPECT_NE(s, make_transductive_split(g, 0.1, 0.1, 4));
}

TEST(Split, TransductiveRejectsBadFractions) {
  auto g = path_graph(20);
  EXPECT_THROW(make_transductive_split(g, 0.0, 0.1, 0), ConfigError);
  EXPECT_THROW(make_transductive_split(g, 0.6, 0.4, 0), ConfigError);
  EXPECT_THROW(make_transductive_split(g, -0.1, 0.1, 0), ConfigError);
}

TEST(Split, PerClassTakesExactlyThatManyPerClass) {
  auto g = synth_graph(SynthSpec{.nodes = 600, .classes = 6, .feature_dim = 4});
  auto s = make_per_class_split(g, 56, 100, 1);
  EXPECT_EQ(s.train_ids.size(), 336u);
  std::vector<int> per(6, 0);
  for (auto v : s.train_ids) ++per[static_cast<std::size_t>(g.labels[v])];
  for (int c : per) EXPECT_EQ(c, 56);
  EXPECT_EQ(s.val_ids.size(), 100u);
  EXPECT_EQ(s.test_ids.size(), 600u - 436u);
}

TEST(Split, InductiveSizesAndContainment) {
  auto g = synth_graph(cora_like_spec());
  auto s = make_inductive_split(g, 9);
  ASSERT_TRUE(s.inductive);
  EXPECT_EQ(s.inductive->train_nodes.size(), 1354u);
  EXPECT_EQ(s.inductive->val_nodes.size(), 1624u);
  EXPECT_EQ(s.inductive->test_nodes.size(), 2708u);
  auto contains = [](const std::vector<NodeId>& big, const std::vector<NodeId>& small) {
    return std::includes(big.begin(), big.end(), small.begin(), small.end());
  };
  EXPECT_TRUE(contains(s.inductive->val_nodes, s.inductive->train_nodes));
  EXPECT_TRUE(contains(s.inductive->test_nodes, s.inductive->val_nodes));
  EXPECT_TRUE(contains(s.inductive->train_nodes, s.train_ids));
  EXPECT_EQ(s.train_ids.size(), 135u);

  SplitGraphs graphs(g, s);
  const auto* train = graphs.views().train;
  std::set<NodeId> in(s.inductive->train_nodes.begin(), s.inductive->train_nodes.end());
  for (NodeId v = 0; v < train->num_nodes; ++v)
    for (auto u : train->neighbors(v)) EXPECT_TRUE(in.count(u) && in.count(v));
}

TEST(Split, InductiveOnTenNodePath) {
  auto s = make_inductive_split(path_graph(10), 0);
  EXPECT_EQ(s.inductive->train_nodes.size(), 5u);
  EXPECT_EQ(s.inductive->val_nodes.size(), 6u);
  EXPECT_EQ(s.inductive->test_nodes.size(), 10u);
  EXPECT_THROW(make_inductive_split(path_graph(9), 0), ConfigError);
}

TEST(Sampler, SmallNeighborhoodIsReturnedWhole) {
  auto g = path_graph(4);
  SamplerConfig cfg;
  auto s = sample_neighbors(g, 1, cfg, 0);
  EXPECT_EQ(s, (std::vector<NodeId>{0, 2}));
}

TEST(Sampler, CapsAtMaxNeighbors) {
  std::vector<std::pair<NodeId, NodeId>> star;
  for (NodeId v = 1; v <= 40; ++v) star.emplace_back(0, v);
  auto g = make_bundle(41, 1, 1, star, std::vector<float>(41), std::vector<std::int32_t>(41));
  SamplerConfig cfg{.seed = 11};
  auto s = sample_neighbors(g, 0, cfg, 5);
  EXPECT_EQ(s.size(), 25u);
  EXPECT_EQ(std::set<NodeId>(s.begin(), s.end()).size(), 25u);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  for (auto u : s) EXPECT_TRUE(g.has_edge(0, u));
}

TEST(Sampler, EdgeKeepHalvesAndIsDeterministic) {
  std::vector<std::pair<NodeId, NodeId>> star;
  for (NodeId v = 1; v <= 10; ++v) star.emplace_back(0, v);
  auto g = make_bundle(11, 1, 1, star, std::vector<float>(11), std::vector<std::int32_t>(11));
  SamplerConfig cfg{.edge_keep_fraction = 0.5, .seed = 2};
  const auto first = sample_neighbors(g, 0, cfg, 7);
  EXPECT_EQ(first.size(), 5u);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(sample_neighbors(g, 0, cfg, 7), first);
  bool differs = false;
  for (std::uint64_t tag = 0; tag < 20 && !differs; ++tag) differs = sample_neighbors(g, 0, cfg, tag) != first;
  EXPECT_TRUE(differs);
}

TEST(Sampler, ValidatesConfig) {
  EXPECT_THROW((SamplerConfig{.max_neighbors_per_hop = 0}.validate()), ConfigError);
  EXPECT_THROW((SamplerConfig{.edge_keep_fraction = 0.0}.validate()), ConfigError);
  EXPECT_THROW((SamplerConfig{.edge_keep_fraction = 1.5}.validate()), ConfigError);
}

TEST(Synth, PerfectHomophilyHasNoCrossClassEdges) {
  auto g = synth_graph(SynthSpec{.nodes = 200, .classes = 4, .homophily = 1.0, .feature_dim = 4, .avg_degree = 6});
  for (auto [u, v] : undirected_edges(g)) EXPECT_EQ(g.labels[u], g.labels[v]);
  EXPECT_EQ(g.directed_edge_entries(), 2u * 600u);
}

TEST(Synth, UniformHomophilyMatchesRandomPairing) {
  // With homophily 1/C the partner's class is uniform, so the intra-class
  // share of edges should sit near 1/C.
  const std::size_t classes = 4;
  auto g = synth_graph(SynthSpec{.nodes = 2000, .classes = classes, .homophily = 1.0 / classes,
                                 .feature_dim = 2, .avg_degree = 10, .seed = 5});
  std::size_t same = 0, total = 0;
  for (auto [u, v] : undirected_edges(g)) {
    ++total;
    same += g.labels[u] == g.labels[v];
  }
  EXPECT_NEAR(static_cast<double>(same) / static_cast<double>(total), 0.25, 0.02);
}

TEST(Synth, DeterministicAndRejectsInvalid) {
  SynthSpec spec{.nodes = 50, .classes = 5, .seed = 8};
  EXPECT_EQ(synth_graph(spec), synth_graph(spec));
  spec.seed = 9;
  EXPECT_NE(synth_graph(spec), synth_graph(SynthSpec{.nodes = 50, .classes = 5, .seed = 8}));
  EXPECT_THROW(synth_graph(SynthSpec{.nodes = 3, .classes = 4}), ConfigError);
  EXPECT_THROW(synth_graph(SynthSpec{.homophily = 1.5}), ConfigError);
}

TEST(Synth, CoraLikeShape) {
  auto g = synth_graph(cora_like_spec());
  EXPECT_EQ(g.num_nodes, 2708u);
  EXPECT_EQ(g.feature_dim, 1433u);
  EXPECT_EQ(g.num_classes, 7u);
  EXPECT_EQ(g.directed_edge_entries(), 10566u);
}
