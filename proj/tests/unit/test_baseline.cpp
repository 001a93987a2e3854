#include <gtest/gtest.h>

#include <retexo/baseline.hpp>
#include <retexo/synth.hpp>

#include "oracles.hpp"

using namespace retexo;
using namespace retexo::protocol;
using net::Kind;
using net::kServer;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.num_layers = 2;
  c.rounds = 1;
  c.hidden = 4;
  c.heads = 2;
  c.pool_dim = 4;
  c.seed = 1;
  c.log_events = true;
  return c;
}

// Center 0 with leaves 1, 2, 3; I = 3, C = 2.
GraphBundle star4() {
  const std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {0, 2}, {0, 3}};
  return make_bundle(4, 3, 2, edges, std::vector<float>(12, 0.5f), {0, 1, 0, 1});
}

SplitSpec manual_split(std::vector<NodeId> train, std::vector<NodeId> val, std::vector<NodeId> test) {
  SplitSpec s;
  s.train_ids = std::move(train);
  s.val_ids = std::move(val);
  s.test_ids = std::move(test);
  return s;
}

std::vector<net::Message> sorted(std::vector<net::Message> v) {
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  return v;
}

}  // namespace

TEST(BaselineLedger, StarWithOneTrainClientMatchesHandEnumeration) {
  const auto g = star4();
  const auto split = manual_split({0}, {}, {1, 2, 3});
  const GraphViews views{&g, &g, &g};
  const auto res = train_baseline(views, split, nn::Arch::gcn, tiny_config());
  // I = 3, H = 4, C = 2; bias-free layers: 2*3*4 = 24 and 2*4*2 = 16 floats.
  const std::uint64_t I = 3, H = 4, layer0 = 24, model = 40;
  std::vector<net::Message> want;
  for (NodeId w : {1u, 2u, 3u}) {
    want.push_back({0, w, 0, Kind::repr0, I});
    want.push_back({0, 0, w, Kind::model_share, layer0});
    want.push_back({0, 0, w, Kind::repr0, I});
    want.push_back({0, w, 0, Kind::repr1, H});
    want.push_back({0, w, 0, Kind::grad_factor, I});
  }
  want.push_back({0, kServer, 0, Kind::server_model, model});
  want.push_back({0, 0, kServer, Kind::grad_up, model});
  EXPECT_EQ(res.ledger.events(), sorted(want));
}

TEST(BaselineLedger, ValidationClientReusesCachedFeatures) {
  const auto g = star4();
  const auto split = manual_split({0}, {1}, {2, 3});
  const GraphViews views{&g, &g, &g};
  const auto res = train_baseline(views, split, nn::Arch::gcn, tiny_config());
  const std::uint64_t I = 3, H = 4, layer0 = 24, model = 40;
  std::vector<net::Message> want;
  for (NodeId w : {1u, 2u, 3u}) {
    want.push_back({0, w, 0, Kind::repr0, I});
    want.push_back({0, 0, w, Kind::model_share, layer0});
    want.push_back({0, 0, w, Kind::repr0, I});
    want.push_back({0, w, 0, Kind::repr1, H});
    want.push_back({0, w, 0, Kind::grad_factor, I});
  }
  // validation client 1: its only neighbor 0 already holds every raw feature it needs
  want.push_back({0, 1, 0, Kind::model_share, layer0});
  want.push_back({0, 0, 1, Kind::repr1, H});
  want.push_back({0, kServer, 0, Kind::server_model, model});
  want.push_back({0, 0, kServer, Kind::grad_up, model});
  want.push_back({0, kServer, 1, Kind::server_model, model});
  want.push_back({0, 1, kServer, Kind::val_report, 2});
  EXPECT_EQ(res.ledger.events(), sorted(want));
}

TEST(BaselineLedger, SingleLayerNeedsNoFactorsOrShares) {
  const auto g = star4();
  const auto split = manual_split({0}, {}, {1, 2, 3});
  auto cfg = tiny_config();
  cfg.num_layers = 1;
  const auto res = train_baseline({&g, &g, &g}, split, nn::Arch::gcn, cfg);
  EXPECT_EQ(res.ledger.kind(Kind::grad_factor).messages, 0u);
  EXPECT_EQ(res.ledger.kind(Kind::model_share).messages, 0u);
  EXPECT_EQ(res.ledger.kind(Kind::repr0).messages, 3u);
}

TEST(BaselineLedger, IsolatedTrainClientOnlyTalksToServer) {
  auto g = make_bundle(3, 2, 2, std::vector<std::pair<NodeId, NodeId>>{{1, 2}}, std::vector<float>(6, 1.0f), {0, 1, 0});
  const auto res = train_baseline({&g, &g, &g}, manual_split({0}, {}, {1, 2}), nn::Arch::sage, tiny_config());
  EXPECT_EQ(res.ledger.channel(net::Channel::client_to_client).bytes, 0u);
  EXPECT_EQ(res.ledger.channel(net::Channel::client_to_server).messages, 2u);
}

TEST(BaselineLedger, ZeroRoundsLeaveModelUntouchedAndLedgerEmpty) {
  auto g = synth_graph(SynthSpec{.nodes = 30, .classes = 2, .feature_dim = 3});
  auto split = make_transductive_split(g, 0.3, 0.2, 1);
  auto cfg = tiny_config();
  cfg.rounds = 0;
  const auto res = train_baseline({&g, &g, &g}, split, nn::Arch::gat, cfg);
  EXPECT_EQ(res.model, make_baseline_model(nn::Arch::gat, g, cfg));
  EXPECT_EQ(res.ledger.channel(net::Channel::client_to_client), net::Totals{});
  EXPECT_EQ(res.ledger.channel(net::Channel::client_to_server), net::Totals{});
}

TEST(BaselineLedger, ModelShareScalesWithSampledDegree) {
  // Stars with 5 and 10 leaves; model-share traffic of the center doubles.
  auto star = [](NodeId leaves) {
    std::vector<std::pair<NodeId, NodeId>> e;
    for (NodeId v = 1; v <= leaves; ++v) e.emplace_back(0, v);
    return make_bundle(leaves + 1, 3, 2, e, std::vector<float>((leaves + 1) * 3, 1.0f),
                       std::vector<std::int32_t>(leaves + 1, 0));
  };
  const auto g5 = star(5), g10 = star(10);
  const auto a = train_baseline({&g5, &g5, &g5}, manual_split({0}, {}, {1}), nn::Arch::gcn, tiny_config());
  const auto b = train_baseline({&g10, &g10, &g10}, manual_split({0}, {}, {1}), nn::Arch::gcn, tiny_config());
  EXPECT_EQ(2 * a.ledger.kind(Kind::model_share).payload, b.ledger.kind(Kind::model_share).payload);
}

TEST(CostSchedule, PerRoundModelShareForTenNeighbors) {
  const auto model = nn::make_gnn(nn::Arch::gcn, 2, 1000, 256, 7, {}, 0);
  const auto costs = CostSchedule::of(model);
  EXPECT_EQ(costs.model_share(1), 2u * 1000 * 256);
  EXPECT_EQ(10 * costs.model_share(1) * net::kBytesPerFloat, 20'480'000u);
  EXPECT_EQ(costs.hidden_reprs(1), 256u);
  EXPECT_EQ(costs.factors(1), 1000u);
  EXPECT_EQ(10 * costs.factors(1) * net::kBytesPerFloat, 40'000u);
  EXPECT_EQ(costs.model_share(2), 0u);
  EXPECT_EQ(costs.factors(2), 0u);
}

TEST(CostSchedule, DeeperModelsShareMoreLayersCloserIn) {
  const auto model = nn::make_gnn(nn::Arch::sage, 3, 5, 8, 3, {.pool_dim = 4}, 0);
  const auto costs = CostSchedule::of(model);
  EXPECT_EQ(costs.model_share(1), model.layer_floats(0) + model.layer_floats(1));
  EXPECT_EQ(costs.model_share(2), model.layer_floats(0));
  EXPECT_EQ(costs.hidden_reprs(1), 16u);
  EXPECT_EQ(costs.factors(1), 5u + 8u);
}

TEST(ServerRound, ModelDownAndUpPerTrainClientDownPerValidationClient) {
  RoundPlan plan;
  plan.clients.train = {2};
  plan.clients.val = {4, 5};
  std::vector<net::Message> out;
  charge_server_round(plan, 250'000, out);
  net::CommLedger ledger(6);
  ledger.record_batch(out);
  EXPECT_EQ(ledger.client(2).c2s, 2 * (1'000'000u + 8));
  EXPECT_EQ(ledger.client(4).c2s, 1'000'000u + 8 + 16);
  out.clear();
  charge_server_round(RoundPlan{}, 250'000, out);
  EXPECT_TRUE(out.empty());
}

TEST(ServerRound, ClientToServerTotalMatchesSampledSchedule) {
  auto g = synth_graph(SynthSpec{.nodes = 80, .classes = 3, .feature_dim = 4, .avg_degree = 3});
  auto split = make_transductive_split(g, 0.3, 0.2, 1);
  auto cfg = tiny_config();
  cfg.rounds = 5;
  cfg.batch_cap = 10;
  const auto res = train_baseline({&g, &g, &g}, split, nn::Arch::gcn, cfg);
  const std::uint64_t model = res.model.num_floats() * 4 + 8;
  std::uint64_t want = 0;
  for (std::uint32_t r = 0; r < cfg.rounds; ++r) {
    const auto s = sample_clients(split.train_ids, split.val_ids, cfg.batch_cap, cfg.seed, 0, r);
    want += s.train.size() * 2 * model + s.val.size() * (model + 16);
  }
  EXPECT_EQ(res.ledger.channel(net::Channel::client_to_server).bytes, want);
}

TEST(RoundPlan, HopsOnTriangleAndIsolatedNode) {
  const std::vector<std::pair<NodeId, NodeId>> edges{{0, 1}, {1, 2}, {0, 2}};
  auto g = make_bundle(4, 1, 1, edges, std::vector<float>(4), std::vector<std::int32_t>(4));
  auto cfg = tiny_config();
  const std::vector<NodeId> train{0, 3};
  const auto plan = plan_round(g, g, train, {}, cfg, 0);
  const auto h = plan.hops(0, plan.train_adjacency);
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h[0], std::vector<NodeId>{0});
  EXPECT_EQ(h[1], (std::vector<NodeId>{1, 2}));
  EXPECT_TRUE(h[2].empty());
  const auto iso = plan.hops(3, plan.train_adjacency);
  EXPECT_EQ(iso, (std::vector<std::vector<NodeId>>{{3}, {}, {}}));
}

TEST(RoundPlan, DeterministicAndCapped) {
  auto g = synth_graph(SynthSpec{.nodes = 300, .classes = 3, .feature_dim = 2, .avg_degree = 40, .seed = 2});
  auto split = make_transductive_split(g, 0.3, 0.2, 1);
  auto cfg = tiny_config();
  cfg.batch_cap = 50;
  const auto a = plan_round(g, g, split.train_ids, split.val_ids, cfg, 3);
  const auto b = plan_round(g, g, split.train_ids, split.val_ids, cfg, 3);
  EXPECT_EQ(a.clients.train, b.clients.train);
  EXPECT_EQ(a.clients.val, b.clients.val);
  EXPECT_LE(a.clients.train.size() + a.clients.val.size(), 50u);
  for (auto v : a.clients.train) {
    const auto hv = a.hops(v, a.train_adjacency);
    EXPECT_EQ(hv, b.hops(v, b.train_adjacency));
    EXPECT_LE(hv[1].size(), 25u);
    for (auto u : hv[1]) {
      EXPECT_TRUE(g.has_edge(u, v));
      EXPECT_EQ(a.train_adjacency.neighbors(u).size(), std::min<std::size_t>(25, g.degree(u)));
    }
  }
}

TEST(BaselineTraining, BitIdenticalToCentralizedTrainer) {
  auto g = synth_graph(SynthSpec{.nodes = 40, .classes = 3, .feature_dim = 5, .avg_degree = 5, .seed = 9});
  auto split = make_transductive_split(g, 0.4, 0.0, 2);
  for (auto arch : {nn::Arch::gcn, nn::Arch::sage, nn::Arch::gat}) {
    auto cfg = tiny_config();
    cfg.hidden = 6;
    cfg.rounds = 4;
    cfg.batch_cap = 7;
    cfg.neighbor_cap = 3;
    const auto trajectory = oracle::centralized_trajectory(g, split, arch, cfg);
    for (std::size_t r = 1; r <= cfg.rounds; ++r) {
      cfg.rounds = r;
      const auto res = train_baseline({&g, &g, &g}, split, arch, cfg);
      EXPECT_EQ(res.model, trajectory[r - 1]) << nn::to_string(arch) << " round " << r;
    }
  }
}

TEST(BaselineTraining, ClientTrafficIsLinearInRounds) {
  auto g = synth_graph(SynthSpec{.nodes = 60, .classes = 3, .feature_dim = 4, .avg_degree = 4, .seed = 3});
  auto split = make_transductive_split(g, 0.3, 0.2, 1);
  auto cfg = tiny_config();
  auto c2c = [&](std::size_t rounds) {
    cfg.rounds = rounds;
    return train_baseline({&g, &g, &g}, split, nn::Arch::gcn, cfg).ledger.channel(net::Channel::client_to_client).bytes;
  };
  const auto a = c2c(2), b = c2c(4), c = c2c(8);
  EXPECT_EQ(c - a, 3 * (b - a));
  EXPECT_GT(b, a);
}

TEST(BaselineTraining, DeterministicAcrossRuns) {
  auto g = synth_graph(SynthSpec{.nodes = 50, .classes = 3, .feature_dim = 4, .avg_degree = 4, .seed = 4});
  auto split = make_transductive_split(g, 0.3, 0.2, 1);
  auto cfg = tiny_config();
  cfg.rounds = 3;
  const auto a = train_baseline({&g, &g, &g}, split, nn::Arch::sage, cfg);
  const auto b = train_baseline({&g, &g, &g}, split, nn::Arch::sage, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.ledger, b.ledger);
}
