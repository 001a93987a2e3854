#pragma once

// End-to-end distributed GNN training. The model is trained with the same
// kernels a centralized trainer would use, over the sampled K-hop blocks of
// the round's clients; every message the distributed enactment would send
// (model shares, representations, gradient factors, server traffic) is
// charged to the ledger.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "errors.hpp"
#include "federated.hpp"
#include "graph.hpp"
#include "kernels.hpp"
#include "netsim.hpp"
#include "optim.hpp"
#include "params.hpp"

namespace retexo::protocol {

/// Per-round sampled neighbor lists, filled for the nodes a round touches.
class SampledAdjacency {
 public:
  SampledAdjacency() = default;
  SampledAdjacency(const GraphBundle& g, const SamplerConfig& sampler, std::uint64_t round_tag)
      : g_(&g), sampler_(sampler), tag_(round_tag), lists_(g.num_nodes), filled_(g.num_nodes, 0) {}

  /// Samples the neighbors of every node within `depth` hops of `roots`.
  void expand(std::span<const NodeId> roots, std::size_t depth) {
    std::vector<NodeId> frontier(roots.begin(), roots.end()), next;
    for (std::size_t d = 0; d < depth && !frontier.empty(); ++d) {
      next.clear();
      for (auto v : frontier) {
        if (!filled_[v]) fill(v);
        next.insert(next.end(), lists_[v].begin(), lists_[v].end());
      }
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      frontier.swap(next);
    }
  }

  std::span<const NodeId> neighbors(NodeId v) const {
    if (!filled_.at(v)) throw std::logic_error("neighbors of node " + std::to_string(v) + " were not sampled");
    return lists_[v];
  }
  bool sampled(NodeId v) const { return filled_.at(v) != 0; }
  const GraphBundle& graph() const { return *g_; }

 private:
  void fill(NodeId v) {
    lists_[v] = sample_neighbors(*g_, v, sampler_, tag_);
    filled_[v] = 1;
  }
  const GraphBundle* g_ = nullptr;
  SamplerConfig sampler_;
  std::uint64_t tag_ = 0;
  std::vector<std::vector<NodeId>> lists_;
  std::vector<std::uint8_t> filled_;
};

struct RoundPlan {
  std::uint32_t round = 0;
  std::size_t num_layers = 0;
  ClientSample clients;
  SampledAdjacency train_adjacency;  // covers train clients' K-hop neighborhoods
  SampledAdjacency val_adjacency;    // covers validation clients' K-hop neighborhoods

  /// Nodes at sampled distance exactly p from `v`, for p = 0..K.
  std::vector<std::vector<NodeId>> hops(NodeId v, const SampledAdjacency& adj) const {
    std::vector<std::vector<NodeId>> out{{v}};
    std::vector<NodeId> seen{v};
    for (std::size_t p = 1; p <= num_layers; ++p) {
      std::vector<NodeId> next;
      for (auto x : out.back())
        for (auto u : adj.neighbors(x))
          if (!std::binary_search(seen.begin(), seen.end(), u)) next.push_back(u);
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      seen.insert(seen.end(), next.begin(), next.end());
      std::sort(seen.begin(), seen.end());
      out.push_back(std::move(next));
      if (out.back().empty()) {
        while (out.size() <= num_layers) out.emplace_back();
        break;
      }
    }
    return out;
  }
};

/// Samples the round's clients and their neighborhoods. Neighbor samples are
/// keyed on (seed, node, round), so every client sees the same sampled graph.
inline RoundPlan plan_round(const GraphBundle& train_graph, const GraphBundle& val_graph,
                            std::span<const NodeId> train_ids, std::span<const NodeId> val_ids,
                            const TrainConfig& cfg, std::uint32_t round) {
  RoundPlan p;
  p.round = round;
  p.num_layers = cfg.num_layers;
  p.clients = sample_clients(train_ids, val_ids, cfg.batch_cap, cfg.seed, 0, round);
  p.train_adjacency = SampledAdjacency(train_graph, cfg.sampler(), round);
  p.train_adjacency.expand(p.clients.train, cfg.num_layers);
  if (&val_graph == &train_graph) {
    p.train_adjacency.expand(p.clients.val, cfg.num_layers);
    p.val_adjacency = p.train_adjacency;
  } else {
    p.val_adjacency = SampledAdjacency(val_graph, cfg.sampler(), round);
    p.val_adjacency.expand(p.clients.val, cfg.num_layers);
  }
  return p;
}

/// Float counts of every message kind, derived from the model's tensors.
struct CostSchedule {
  std::size_t num_layers = 0;
  std::uint64_t feature_floats = 0;  // I
  std::uint64_t hidden_floats = 0;   // H
  std::vector<std::uint64_t> layer_floats;
  std::vector<std::uint64_t> layer_inputs;
  std::uint64_t model_floats = 0;

  static CostSchedule of(const nn::ModelParams& model) {
    CostSchedule c;
    c.num_layers = model.layers.size();
    c.feature_floats = model.dims.input;
    c.hidden_floats = model.dims.hidden;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      c.layer_floats.push_back(model.layer_floats(l));
      c.layer_inputs.push_back(model.layers[l].in);
    }
    c.model_floats = model.num_floats();
    return c;
  }

  /// Layers 0..K-hop-1, which a node at `hop` needs to compute its share.
  std::uint64_t model_share(std::size_t hop) const {
    std::uint64_t n = 0;
    for (std::size_t j = 0; j + hop < num_layers; ++j) n += layer_floats[j];
    return n;
  }
  /// Q^1..Q^{K-hop} sent from a node at `hop` to its parent.
  std::uint64_t hidden_reprs(std::size_t hop) const { return hop < num_layers ? (num_layers - hop) * hidden_floats : 0; }
  /// Inputs of the layers a node at `hop` computed, returned as gradient factors.
  std::uint64_t factors(std::size_t hop) const {
    std::uint64_t n = 0;
    for (std::size_t j = 0; j + hop < num_layers; ++j) n += layer_inputs[j];
    return n;
  }
};

/// Ordered pairs whose raw features have been exchanged; later exchanges are
/// served from the receiver's cache.
class FeatureCache {
 public:
  bool first_contact(NodeId src, NodeId dst) {
    return seen_.insert(static_cast<std::uint64_t>(src) << 32 | dst).second;
  }
  std::size_t size() const { return seen_.size(); }

 private:
  std::unordered_set<std::uint64_t> seen_;
};

namespace detail {

/// Walks the computation tree of one client: node `x` at distance `hop`,
/// reached from `parent`.
inline void enact_forward(const SampledAdjacency& adj, const CostSchedule& costs, FeatureCache& cache, NodeId x,
                          NodeId parent, std::size_t hop, std::uint32_t round, std::vector<net::Message>& out) {
  const auto k = costs.num_layers;
  if (hop >= 1) {
    if (const auto share = costs.model_share(hop)) out.push_back({round, parent, x, net::Kind::model_share, share});
  }
  if (hop + 1 <= k) {
    for (auto w : adj.neighbors(x))
      if (cache.first_contact(w, x)) out.push_back({round, w, x, net::Kind::repr0, costs.feature_floats});
  }
  if (hop + 1 < k)
    for (auto w : adj.neighbors(x)) enact_forward(adj, costs, cache, w, x, hop + 1, round, out);
  if (hop >= 1) {
    if (const auto h = costs.hidden_reprs(hop)) out.push_back({round, x, parent, net::Kind::repr1, h});
  }
}

inline void enact_backward(const SampledAdjacency& adj, const CostSchedule& costs, NodeId x, NodeId parent,
                           std::size_t hop, std::uint32_t round, std::vector<net::Message>& out) {
  if (hop + 1 < costs.num_layers)
    for (auto w : adj.neighbors(x)) enact_backward(adj, costs, w, x, hop + 1, round, out);
  if (hop >= 1) {
    if (const auto f = costs.factors(hop)) out.push_back({round, x, parent, net::Kind::grad_factor, f});
  }
}

}  // namespace detail

/// Forward-pass traffic of every sampled train and validation client: model
/// shares down the computation tree, raw-feature exchanges on first contact,
/// hidden representations back up the tree.
inline void charge_forward_pass(const RoundPlan& plan, const CostSchedule& costs, FeatureCache& cache,
                                std::vector<net::Message>& out) {
  for (auto v : plan.clients.train)
    detail::enact_forward(plan.train_adjacency, costs, cache, v, v, 0, plan.round, out);
  for (auto v : plan.clients.val) detail::enact_forward(plan.val_adjacency, costs, cache, v, v, 0, plan.round, out);
}

/// Gradient factors flowing back to each train client from up to K-1 hops.
inline void charge_backward_pass(const RoundPlan& plan, const CostSchedule& costs, std::vector<net::Message>& out) {
  for (auto v : plan.clients.train) detail::enact_backward(plan.train_adjacency, costs, v, v, 0, plan.round, out);
}

/// Model down to every sampled client, updated model up from train clients,
/// and the validation report.
inline void charge_server_round(const RoundPlan& plan, std::uint64_t model_floats, std::vector<net::Message>& out) {
  for (auto v : plan.clients.train) {
    out.push_back({plan.round, net::kServer, v, net::Kind::server_model, model_floats});
    out.push_back({plan.round, v, net::kServer, net::Kind::grad_up, model_floats});
  }
  for (auto v : plan.clients.val) {
    out.push_back({plan.round, net::kServer, v, net::Kind::server_model, model_floats});
    out.push_back({plan.round, v, net::kServer, net::Kind::val_report, 2});
  }
}

/// Forward pass of a GNN over the sampled blocks of `targets`.
inline nn::Tape<float> forward_blocks(const nn::ModelParams& model, const GraphBundle& g,
                                      std::span<const NodeId> targets, const NeighborFn& nbrs, LevelBatch* keep = nullptr) {
  auto b = build_levels(targets, model.num_graph_layers(), nbrs);
  auto tape = nn::forward(model, gather_rows(g, b.levels[0]), b.topologies);
  if (keep) *keep = std::move(b);
  return tape;
}

/// Inference over `ids` with neighbor samples keyed on `tag` (uncharged).
inline EvalResult evaluate_gnn(const nn::ModelParams& model, const GraphBundle& g, std::span<const NodeId> ids,
                               const TrainConfig& cfg, std::uint64_t tag) {
  if (ids.empty()) return {};
  SampledAdjacency adj(g, cfg.sampler(), tag);
  adj.expand(ids, model.num_graph_layers());
  std::vector<NodeId> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  auto tape = forward_blocks(model, g, sorted, [&](NodeId v) { return adj.neighbors(v); });
  return score(tape.output, gather_labels(g, sorted));
}

/// Neighbor samples used when scoring test nodes.
inline constexpr std::uint64_t kInferenceTag = 0xfffffffffULL;

struct BaselineResult {
  nn::ModelParams model;
  net::CommLedger ledger;
  StageHistory history;
};

inline nn::ModelParams make_baseline_model(nn::Arch arch, const GraphBundle& g, const TrainConfig& cfg) {
  return nn::make_gnn(arch, cfg.num_layers, g.feature_dim, cfg.hidden, g.num_classes, cfg.model_options(),
                      derive_key(cfg.seed, {stream::init, 0}));
}

/// One FedSGD step of the baseline: the update every train client would make,
/// averaged. Returns the mean training loss.
inline double baseline_step(nn::ModelParams& model, nn::OptimizerState& opt, const RoundPlan& plan) {
  const auto& adj = plan.train_adjacency;
  LevelBatch b;
  auto tape = forward_blocks(model, adj.graph(), plan.clients.train, [&](NodeId v) { return adj.neighbors(v); }, &b);
  auto loss = nn::softmax_cross_entropy(tape.output, gather_labels(adj.graph(), plan.clients.train));
  auto grads = model.zeros_like();
  nn::backward(model, tape, b.topologies, std::move(loss.d_logits), grads);
  nn::sgd_step(model, opt, grads);
  return loss.loss;
}

inline BaselineResult train_baseline(const GraphViews& views, const SplitSpec& split, nn::Arch arch,
                                     const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.num_layers == 0) throw ConfigError("a GNN needs at least one layer");
  if (split.train_ids.empty()) throw ConfigError("no train clients to sample");
  const auto& g = *views.train;
  BaselineResult res;
  res.ledger = net::CommLedger(g.num_nodes, cfg.attribution, cfg.log_events);
  nn::ModelParams model = make_baseline_model(arch, g, cfg);
  nn::OptimizerState opt(cfg.optimizer, model);
  const auto costs = CostSchedule::of(model);
  FeatureCache cache;
  EarlyStopTracker tracker(cfg.patience);
  std::optional<nn::ModelParams> best;

  for (std::uint32_t r = 0; r < cfg.rounds; ++r) {
    const auto plan = plan_round(g, *views.val, split.train_ids, split.val_ids, cfg, r);
    bool stop = false;
    if (!plan.clients.val.empty()) {
      const auto& adj = plan.val_adjacency;
      auto tape = forward_blocks(model, adj.graph(), plan.clients.val, [&](NodeId v) { return adj.neighbors(v); });
      const auto e = score(tape.output, gather_labels(adj.graph(), plan.clients.val));
      res.history.val_loss.push_back(e.loss);
      res.history.val_accuracy.push_back(e.accuracy());
      stop = early_stop_check(tracker, e.loss) == StopDecision::stop;
      if (tracker.improved()) best = model;
    }
    res.history.train_loss.push_back(baseline_step(model, opt, plan));

    std::vector<net::Message> msgs;
    charge_forward_pass(plan, costs, cache, msgs);
    charge_backward_pass(plan, costs, msgs);
    charge_server_round(plan, costs.model_floats, msgs);
    res.ledger.record_batch(std::move(msgs));
    ++res.history.rounds_run;
    if (stop) {
      res.history.stopped_early = true;
      break;
    }
  }
  if (tracker.seen()) {
    res.history.best_round = tracker.best_round();
    res.history.best_val_loss = tracker.best_loss();
  } else {
    res.history.best_round = res.history.rounds_run;
  }
  res.model = best ? std::move(*best) : std::move(model);
  return res;
}

}  // namespace retexo::protocol
