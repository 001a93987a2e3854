#pragma once

// Retexo training: K+1 models trained one after another with FedSGD rounds.
// Between consecutive models the server syncs the last trained model and
// every client shares one embedding with each reachable neighbor.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "errors.hpp"
#include "federated.hpp"
#include "graph.hpp"
#include "kernels.hpp"
#include "netsim.hpp"
#include "optim.hpp"
#include "params.hpp"

namespace retexo::protocol {

/// Every client's embeddings Q^0..Q^m over one graph, plus the neighbor
/// embeddings each client received in every message-passing round.
class EmbeddingPipeline {
 public:
  struct StageBatch {
    nn::Rows<float> input;
    std::vector<nn::Topology> topologies;  // empty for stage 0
  };

  EmbeddingPipeline(const GraphBundle& g, std::vector<NodeId> members, net::ContactSchedule contacts,
                    SamplerConfig sampler)
      : g_(&g), members_(std::move(members)), contacts_(contacts), sampler_(sampler) {
    // each round a client hears from a kept fraction of its neighbors; the
    // neighbor cap then applies to what actually arrived
    reach_ = {std::numeric_limits<std::size_t>::max(), sampler.edge_keep_fraction, sampler.seed};
    sampler_.edge_keep_fraction = 1.0;
    received_.emplace_back();
    aggregated_.emplace_back();
  }

  const GraphBundle& graph() const { return *g_; }
  std::span<const NodeId> members() const { return members_; }

  /// Highest m whose embeddings are available (0 = raw features only).
  std::size_t stage() const { return embeddings_.size(); }

  const nn::Rows<float>& embeddings(std::size_t m) const {
    if (m == 0 || m > embeddings_.size()) throw std::out_of_range("embeddings not computed for this stage");
    return embeddings_[m - 1];
  }
  std::span<const NodeId> received(std::size_t m, NodeId v) const { return received_.at(m).at(v); }
  std::span<const NodeId> aggregation_neighbors(std::size_t m, NodeId v) const { return aggregated_.at(m).at(v); }

  /// Input rows (and topology) of the stage-m model for `targets`.
  StageBatch batch(std::size_t m, std::span<const NodeId> targets) const {
    if (m > stage()) throw std::logic_error("stage input requested before its message-passing round");
    StageBatch b;
    if (m == 0) {
      b.input = gather_rows(*g_, targets);
      return b;
    }
    auto levels = build_levels(targets, 1, [&](NodeId v) { return aggregation_neighbors(m, v); });
    b.input = gather_rows(embeddings(m), levels.levels[0]);
    b.topologies = std::move(levels.topologies);
    return b;
  }

  /// Runs message-passing round m = stage() + 1 with the trained model
  /// MLP_{m-1}: computes Q^m everywhere, delivers it to reachable neighbors
  /// and fixes every client's aggregation sample. Messages are appended to
  /// `messages` when given.
  void advance(const nn::ModelParams& previous, std::vector<net::Message>* messages, std::uint32_t round) {
    const auto m = stage() + 1;
    std::vector<NodeId> all(g_->num_nodes);
    for (NodeId v = 0; v < g_->num_nodes; ++v) all[v] = v;
    auto in = batch(m - 1, all);
    auto tape = nn::forward(previous, std::move(in.input), in.topologies);
    const auto width = tape.output.cols();
    embeddings_.push_back(std::move(tape.output));

    const bool dropping = reach_.edge_keep_fraction < 1.0;
    std::vector<std::vector<NodeId>> reachable;
    if (dropping) {
      reachable.resize(g_->num_nodes);
      for (NodeId u = 0; u < g_->num_nodes; ++u) reachable[u] = sample_from(g_->neighbors(u), u, reach_, m);
    }
    std::vector<std::vector<NodeId>> got(g_->num_nodes);
    for (auto v : members_)
      for (auto u : g_->neighbors(v))
        if ((!dropping || std::binary_search(reachable[u].begin(), reachable[u].end(), v)) &&
            contacts_.contact(v, u, m)) {
          got[u].push_back(v);
          if (messages) messages->push_back({round, v, u, net::Kind::embedding, width});
        }
    std::vector<std::vector<NodeId>> agg(g_->num_nodes);
    for (NodeId v = 0; v < g_->num_nodes; ++v) agg[v] = sample_from(got[v], v, sampler_, m);
    received_.push_back(std::move(got));
    aggregated_.push_back(std::move(agg));
  }

 private:
  const GraphBundle* g_;
  std::vector<NodeId> members_;
  net::ContactSchedule contacts_;
  SamplerConfig sampler_, reach_;
  std::vector<nn::Rows<float>> embeddings_;                  // [m - 1] holds Q^m
  std::vector<std::vector<std::vector<NodeId>>> received_;    // [m][v]
  std::vector<std::vector<std::vector<NodeId>>> aggregated_;  // [m][v]
};

/// Q^m of one client, from its own cache and the trained models.
inline std::vector<float> compute_embedding(const EmbeddingPipeline& pipe, std::span<const nn::ModelParams> models,
                                            NodeId v, std::size_t m) {
  if (m == 0) {
    const auto f = pipe.graph().feature_row(v);
    return {f.begin(), f.end()};
  }
  if (models.size() < m) throw std::logic_error("model " + std::to_string(m - 1) + " has not been trained");
  if (m == 1) return nn::forward_mlp<float>(models[0], pipe.graph().feature_row(v)).first;
  if (pipe.stage() < m - 1) throw std::logic_error("embeddings of stage " + std::to_string(m - 1) + " missing");
  const auto& table = pipe.embeddings(m - 1);
  std::vector<std::vector<float>> neigh;
  for (auto u : pipe.aggregation_neighbors(m - 1, v)) neigh.emplace_back(table.row(u), table.row(u) + table.cols());
  auto [x, topo] = nn::single_target<float>(table.view(v), neigh);
  auto tape = nn::forward(models[m - 1], std::move(x), std::span<const nn::Topology>(&topo, 1));
  return {tape.output.row(0), tape.output.row(0) + tape.output.cols()};
}

/// Loss and correctness of the stage-m model on `ids`.
inline EvalResult evaluate_stage(const nn::ModelParams& model, const EmbeddingPipeline& pipe, std::size_t m,
                                 std::span<const NodeId> ids) {
  if (ids.empty()) return {};
  auto b = pipe.batch(m, ids);
  auto tape = nn::forward(model, std::move(b.input), b.topologies);
  const auto labels = gather_labels(pipe.graph(), ids);
  return score(tape.output, labels);
}

struct StageResult {
  nn::ModelParams model;
  StageHistory history;
};

/// FedSGD rounds for model m: each round samples clients, scores the current
/// model on the validation clients, lets each train client take one gradient
/// step and averages the results. Returns the best-validation-loss snapshot.
inline StageResult federated_learning(nn::ModelParams model, const EmbeddingPipeline& train_pipe,
                                      const EmbeddingPipeline& val_pipe, std::span<const NodeId> train_ids,
                                      std::span<const NodeId> val_ids, std::size_t m, const TrainConfig& cfg,
                                      net::CommLedger& ledger, std::uint32_t& step) {
  if (train_ids.empty()) throw ConfigError("no train clients to sample");
  nn::OptimizerState opt(cfg.optimizer, model);
  EarlyStopTracker tracker(cfg.patience);
  StageResult out;
  std::optional<nn::ModelParams> best;
  const auto model_floats = model.num_floats();
  const auto labels_of = [&](std::span<const NodeId> ids) { return gather_labels(train_pipe.graph(), ids); };

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto round = step++;
    const auto s = sample_clients(train_ids, val_ids, cfg.batch_cap, cfg.seed, m, r);
    if (s.train.empty()) throw ConfigError("a round sampled no train clients");
    std::vector<net::Message> msgs;
    bool stop = false;

    if (!s.val.empty()) {
      const auto e = evaluate_stage(model, val_pipe, m, s.val);
      out.history.val_loss.push_back(e.loss);
      out.history.val_accuracy.push_back(e.accuracy());
      stop = early_stop_check(tracker, e.loss) == StopDecision::stop;
      if (tracker.improved()) best = model;
      for (auto v : s.val) {
        msgs.push_back({round, net::kServer, v, net::Kind::server_model, model_floats});
        msgs.push_back({round, v, net::kServer, net::Kind::val_report, 2});
      }
    }

    auto b = train_pipe.batch(m, s.train);
    auto tape = nn::forward(model, std::move(b.input), b.topologies);
    const auto labels = labels_of(s.train);
    auto loss = nn::softmax_cross_entropy(tape.output, labels);
    out.history.train_loss.push_back(loss.loss);
    auto grads = model.zeros_like();
    nn::backward(model, tape, b.topologies, std::move(loss.d_logits), grads);
    nn::sgd_step(model, opt, grads);
    for (auto v : s.train) {
      msgs.push_back({round, net::kServer, v, net::Kind::server_model, model_floats});
      msgs.push_back({round, v, net::kServer, net::Kind::grad_up, model_floats});
    }
    ledger.record_batch(std::move(msgs));
    ++out.history.rounds_run;
    if (stop) {
      out.history.stopped_early = true;
      break;
    }
  }
  if (tracker.seen()) {
    out.history.best_round = tracker.best_round();
    out.history.best_val_loss = tracker.best_loss();
  } else {
    out.history.best_round = out.history.rounds_run;
  }
  out.model = best ? std::move(*best) : std::move(model);
  return out;
}

/// Fresh model m of a Retexo run: an MLP on raw features for m = 0, then
/// blocks over the previous model's embeddings. Blocks strictly between the
/// first and last model carry the residual connection when enabled.
inline nn::ModelParams make_retexo_model(nn::Aggregator agg, std::size_t m, const GraphBundle& g,
                                         const TrainConfig& cfg) {
  const auto seed = derive_key(cfg.seed, {stream::init, m});
  if (m == 0) return nn::make_mlp(g.feature_dim, cfg.hidden, g.num_classes, seed);
  auto opt = cfg.model_options();
  opt.residual = cfg.residual && m < cfg.num_layers;
  return nn::make_retexo_block(agg, g.num_classes, cfg.hidden, g.num_classes, opt, seed);
}

inline net::ContactSchedule contact_schedule(const TrainConfig& cfg) {
  if (cfg.contact_probability >= 1.0) return net::ContactSchedule::always();
  return net::ContactSchedule::probabilistic(cfg.contact_probability, cfg.seed, cfg.contact_attempts);
}

struct RetexoResult {
  std::vector<nn::ModelParams> models;
  net::CommLedger ledger;
  std::vector<StageHistory> stages;
  std::size_t message_passing_rounds = 0;
};

/// Node sets that act as clients in each graph view.
struct ClientSets {
  std::vector<NodeId> train_graph, val_graph, test_graph;

  static ClientSets of(const GraphBundle& g, const SplitSpec& split) {
    if (split.mode == SplitMode::inductive && split.inductive)
      return {split.inductive->train_nodes, split.inductive->val_nodes, split.inductive->test_nodes};
    std::vector<NodeId> all(g.num_nodes);
    for (NodeId v = 0; v < g.num_nodes; ++v) all[v] = v;
    return {all, all, all};
  }
};

/// Trains MLP_0..MLP_K. Validation in the inductive setting runs on the
/// validation graph without charging the ledger; the training graph's
/// traffic is charged in full.
inline RetexoResult train_retexo(const GraphViews& views, const SplitSpec& split, nn::Aggregator agg,
                                 const TrainConfig& cfg) {
  cfg.validate();
  const auto& g = *views.train;
  const auto clients = ClientSets::of(g, split);
  RetexoResult res;
  res.ledger = net::CommLedger(g.num_nodes, cfg.attribution, cfg.log_events);
  const auto contacts = contact_schedule(cfg);
  EmbeddingPipeline train_pipe(g, clients.train_graph, contacts, cfg.sampler());
  std::optional<EmbeddingPipeline> val_pipe;
  if (views.val != views.train) val_pipe.emplace(*views.val, clients.val_graph, contacts, cfg.sampler());
  std::uint32_t step = 0;

  for (std::size_t m = 0; m <= cfg.num_layers; ++m) {
    if (m >= 1) {
      const auto round = step++;
      std::vector<net::Message> msgs;
      const auto sync_floats = res.models.back().num_floats();
      for (auto v : clients.train_graph) msgs.push_back({round, net::kServer, v, net::Kind::sync, sync_floats});
      train_pipe.advance(res.models.back(), &msgs, round);
      if (val_pipe) val_pipe->advance(res.models.back(), nullptr, round);
      res.ledger.record_batch(std::move(msgs));
      ++res.message_passing_rounds;
    }
    auto stage = federated_learning(make_retexo_model(agg, m, g, cfg), train_pipe, val_pipe ? *val_pipe : train_pipe,
                                    split.train_ids, split.val_ids, m, cfg, res.ledger, step);
    res.models.push_back(std::move(stage.model));
    res.stages.push_back(std::move(stage.history));
  }
  return res;
}

/// Test-time inference of a trained Retexo model list over `g` (uncharged).
inline EvalResult evaluate_retexo(std::span<const nn::ModelParams> models, const GraphBundle& g,
                                  std::vector<NodeId> members, std::span<const NodeId> ids, const TrainConfig& cfg) {
  EmbeddingPipeline pipe(g, std::move(members), contact_schedule(cfg), cfg.sampler());
  for (std::size_t m = 1; m < models.size(); ++m) pipe.advance(models[m - 1], nullptr, 0);
  return evaluate_stage(models.back(), pipe, models.size() - 1, ids);
}

}  // namespace retexo::protocol
