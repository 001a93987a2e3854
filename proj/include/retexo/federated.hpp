#pragma once

// Pieces shared by the Retexo and baseline protocols: run configuration,
// per-round client sampling, early stopping, and batched evaluation helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "kernels.hpp"
#include "netsim.hpp"
#include "optim.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace retexo::protocol {

struct TrainConfig {
  std::size_t num_layers = 2;  // K: GNN layers, or message-passing rounds for Retexo
  std::size_t rounds = 400;
  std::size_t hidden = 256;
  std::size_t heads = 8;
  std::size_t pool_dim = 512;
  bool residual = false;
  nn::OptimizerConfig optimizer;
  std::size_t batch_cap = 1024;
  std::size_t neighbor_cap = 25;
  double edge_keep = 1.0;             // fraction of its neighbors a client hears from per message-passing round
  double contact_probability = 1.0;  // per-attempt success of a client-to-client contact
  std::uint32_t contact_attempts = 1;
  std::size_t patience = 0;  // 0 disables early stopping
  std::uint64_t seed = 0;
  net::Attribution attribution = net::Attribution::sender;
  bool log_events = false;

  void validate() const {
    optimizer.validate();
    if (hidden == 0) throw ConfigError("hidden size must be positive");
    if (batch_cap == 0) throw ConfigError("batch cap must be positive");
    if (heads == 0 || hidden % heads != 0)
      throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                        " attention heads");
    if (rounds > std::numeric_limits<std::uint32_t>::max() / 4) throw ConfigError("too many rounds");
    sampler().validate();
    if (contact_attempts == 0) throw ConfigError("contact attempts must be positive");
    if (!(contact_probability > 0.0 && contact_probability <= 1.0))
      throw ConfigError("contact probability must lie in (0, 1]");
  }

  SamplerConfig sampler() const { return {neighbor_cap, edge_keep, seed}; }
  nn::GraphModelOptions model_options() const { return {heads, pool_dim, residual}; }
};

// ---------------------------------------------------------------------------
// Client sampling

struct ClientSample {
  std::vector<NodeId> train, val;  // sorted
};

/// Up to `cap` clients in total, split between the train and validation pools
/// in proportion to their sizes. Keyed on (seed, stage, round).
inline ClientSample sample_clients(std::span<const NodeId> train_ids, std::span<const NodeId> val_ids,
                                   std::size_t cap, std::uint64_t seed, std::uint64_t stage, std::uint64_t round) {
  ClientSample s;
  const auto nt = train_ids.size(), nv = val_ids.size();
  std::size_t take_train = nt, take_val = nv;
  if (nt + nv > cap) {
    take_train = std::min(nt, static_cast<std::size_t>(static_cast<double>(cap) * static_cast<double>(nt) /
                                                       static_cast<double>(nt + nv)));
    if (take_train == 0 && nt > 0) take_train = 1;
    take_val = std::min(nv, cap - take_train);
  }
  CounterRng tr(derive_key(seed, {stream::clients, stage, round, 0}));
  CounterRng va(derive_key(seed, {stream::clients, stage, round, 1}));
  s.train = tr.sample(train_ids, take_train);
  s.val = va.sample(val_ids, take_val);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

// ---------------------------------------------------------------------------
// Early stopping

enum class StopDecision { keep_going, stop };

class EarlyStopTracker {
 public:
  explicit EarlyStopTracker(std::size_t patience = 0) : patience_(patience) {}

  /// Feeds the validation loss of the next round. A round improves only on a
  /// strictly lower loss.
  StopDecision update(double loss) {
    improved_ = !seen_ || loss < best_;
    if (improved_) {
      best_ = loss;
      best_round_ = round_;
      seen_ = true;
    }
    ++round_;
    return patience_ > 0 && round_ - 1 - best_round_ >= patience_ ? StopDecision::stop : StopDecision::keep_going;
  }

  bool improved() const { return improved_; }
  bool seen() const { return seen_; }
  double best_loss() const { return best_; }
  std::size_t best_round() const { return best_round_; }
  std::size_t rounds() const { return round_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  std::size_t round_ = 0, best_round_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  bool seen_ = false, improved_ = false;
};

inline StopDecision early_stop_check(EarlyStopTracker& tracker, double val_loss) { return tracker.update(val_loss); }

/// Validation record of one trained model.
struct StageHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  std::size_t rounds_run = 0;
  std::size_t best_round = 0;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  bool stopped_early = false;
};

struct EvalResult {
  double loss = 0;
  std::size_t correct = 0, count = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

// ---------------------------------------------------------------------------
// Batches

/// Feature (or embedding) rows of `ids`, in order.
inline nn::Rows<float> gather_rows(const GraphBundle& g, std::span<const NodeId> ids) {
  nn::Rows<float> x(ids.size(), g.feature_dim);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto f = g.feature_row(ids[r]);
    std::copy(f.begin(), f.end(), x.row(r));
  }
  return x;
}

inline nn::Rows<float> gather_rows(const nn::Rows<float>& table, std::span<const NodeId> ids) {
  nn::Rows<float> x(ids.size(), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) std::copy_n(table.row(ids[r]), table.cols(), x.row(r));
  return x;
}

inline std::vector<std::int32_t> gather_labels(const GraphBundle& g, std::span<const NodeId> ids) {
  std::vector<std::int32_t> y(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) y[r] = g.labels[ids[r]];
  return y;
}

inline std::uint32_t row_of(std::span<const NodeId> sorted_ids, NodeId v) {
  auto it = std::lower_bound(sorted_ids.begin(), sorted_ids.end(), v);
  if (it == sorted_ids.end() || *it != v) throw std::logic_error("node missing from a batch level");
  return static_cast<std::uint32_t>(it - sorted_ids.begin());
}

using NeighborFn = std::function<std::span<const NodeId>(NodeId)>;

/// Node sets per graph layer for a batch of targets: level[K] is the batch,
/// level[l] adds the neighbors of level[l + 1]. Topology l maps level l onto
/// level l + 1.
struct LevelBatch {
  std::vector<std::vector<NodeId>> levels;
  std::vector<nn::Topology> topologies;
};

inline LevelBatch build_levels(std::span<const NodeId> targets, std::size_t num_graph_layers, const NeighborFn& nbrs) {
  LevelBatch b;
  b.levels.resize(num_graph_layers + 1);
  b.levels[num_graph_layers].assign(targets.begin(), targets.end());
  std::sort(b.levels[num_graph_layers].begin(), b.levels[num_graph_layers].end());
  for (std::size_t l = num_graph_layers; l-- > 0;) {
    auto& lv = b.levels[l];
    lv = b.levels[l + 1];
    for (auto v : b.levels[l + 1]) {
      const auto n = nbrs(v);
      lv.insert(lv.end(), n.begin(), n.end());
    }
    std::sort(lv.begin(), lv.end());
    lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
  }
  b.topologies.resize(num_graph_layers);
  std::vector<std::uint32_t> rows;
  for (std::size_t l = 0; l < num_graph_layers; ++l) {
    auto& topo = b.topologies[l];
    const auto& src = b.levels[l];
    topo.num_sources = src.size();
    for (auto v : b.levels[l + 1]) {
      rows.clear();
      for (auto u : nbrs(v)) rows.push_back(row_of(src, u));
      topo.add_target(row_of(src, v), rows);
    }
  }
  return b;
}

/// Mean loss and correct count of `logits` rows against labels.
inline EvalResult score(const nn::Rows<float>& logits, std::span<const std::int32_t> labels) {
  auto l = nn::softmax_cross_entropy(logits, labels);
  return {l.loss, l.correct, labels.size()};
}

}  // namespace retexo::protocol
