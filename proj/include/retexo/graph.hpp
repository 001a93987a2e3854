#pragma once

// Graph store: the immutable node-classification bundle, its on-disk format,
// train/validation/test splits and deterministic neighbor sampling.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace retexo {

using NodeId = std::uint32_t;

struct GraphBundle {
  std::size_t num_nodes = 0;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<std::vector<NodeId>> adjacency;  // sorted, symmetric, no self-loops
  std::vector<float> features;                 // num_nodes x feature_dim, row-major
  std::vector<std::int32_t> labels;
  std::size_t dropped_self_loops = 0;
  std::size_t duplicate_edges = 0;

  std::span<const float> feature_row(NodeId v) const {
    return {features.data() + static_cast<std::size_t>(v) * feature_dim, feature_dim};
  }
  std::span<const NodeId> neighbors(NodeId v) const { return adjacency[v]; }
  std::size_t degree(NodeId v) const { return adjacency[v].size(); }

  /// Each undirected edge counted twice.
  std::size_t directed_edge_entries() const {
    std::size_t n = 0;
    for (const auto& a : adjacency) n += a.size();
    return n;
  }

  bool has_edge(NodeId u, NodeId v) const {
    return std::binary_search(adjacency[u].begin(), adjacency[u].end(), v);
  }

  bool operator==(const GraphBundle&) const = default;
};

/// Builds a bundle from an undirected edge list. Self-loops and duplicates are
/// dropped and counted; ids out of range are a DataError.
inline GraphBundle make_bundle(std::size_t num_nodes, std::size_t feature_dim,
                               std::size_t num_classes,
                               std::span<const std::pair<NodeId, NodeId>> edges,
                               std::vector<float> features, std::vector<std::int32_t> labels) {
  GraphBundle g;
  g.num_nodes = num_nodes;
  g.feature_dim = feature_dim;
  g.num_classes = num_classes;
  if (features.size() != num_nodes * feature_dim)
    throw DataError("feature matrix has " + std::to_string(features.size()) + " values, expected " +
                    std::to_string(num_nodes) + " x " + std::to_string(feature_dim));
  if (labels.size() != num_nodes)
    throw DataError("label count " + std::to_string(labels.size()) + " does not match " +
                    std::to_string(num_nodes) + " nodes");
  for (std::size_t v = 0; v < num_nodes; ++v) {
    if (labels[v] < 0 || static_cast<std::size_t>(labels[v]) >= num_classes)
      throw DataError("label " + std::to_string(labels[v]) + " of node " + std::to_string(v) +
                      " is outside [0, " + std::to_string(num_classes) + ")");
  }
  g.adjacency.assign(num_nodes, {});
  for (auto [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes)
      throw DataError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                      ") references a node outside [0, " + std::to_string(num_nodes) + ")");
    if (u == v) {
      ++g.dropped_self_loops;
      continue;
    }
    g.adjacency[u].push_back(v);
    g.adjacency[v].push_back(u);
  }
  std::size_t before = 0, after = 0;
  for (auto& a : g.adjacency) {
    before += a.size();
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    after += a.size();
  }
  g.duplicate_edges = (before - after) / 2;
  g.features = std::move(features);
  g.labels = std::move(labels);
  return g;
}

/// Undirected edge list with u < v, in ascending order.
inline std::vector<std::pair<NodeId, NodeId>> undirected_edges(const GraphBundle& g) {
  std::vector<std::pair<NodeId, NodeId>> out;
  for (NodeId u = 0; u < g.num_nodes; ++u)
    for (NodeId v : g.adjacency[u])
      if (u < v) out.emplace_back(u, v);
  return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

template <class T>
T parse_number(std::string_view tok, const std::filesystem::path& file, std::size_t line) {
  T value{};
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc{} || ptr != tok.data() + tok.size())
    throw DataError(file.string() + ":" + std::to_string(line) + ": cannot parse '" +
                    std::string(tok) + "'");
  return value;
}

template <class T>
std::vector<T> split_numbers(std::string_view line, const std::filesystem::path& file,
                             std::size_t lineno) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    auto next = line.find('\t', pos);
    if (next == std::string_view::npos) next = line.size();
    auto tok = trim(line.substr(pos, next - pos));
    if (!tok.empty()) out.push_back(parse_number<T>(tok, file, lineno));
    pos = next + 1;
  }
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing bundle file " + p.string());
  return in;
}

template <class T>
void append_number(std::string& out, T value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  out.append(buf, ptr);
}

}  // namespace detail

/// Reads a bundle directory: edges.tsv, features.tsv, labels.tsv and an
/// optional meta.json. Edges are symmetrized.
inline GraphBundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("bundle directory " + dir.string() + " not found");

  std::vector<std::int32_t> labels;
  {
    auto in = detail::open_input(dir / "labels.tsv");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto t = detail::trim(line);
      if (t.empty()) continue;
      labels.push_back(detail::parse_number<std::int32_t>(t, dir / "labels.tsv", lineno));
    }
  }

  std::optional<nlohmann::json> meta;
  if (fs::exists(dir / "meta.json")) {
    std::ifstream in(dir / "meta.json");
    try {
      meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("meta.json: " + std::string(e.what()));
    }
  }

  std::vector<float> features;
  std::size_t rows = 0, dim = 0;
  {
    auto in = detail::open_input(dir / "features.tsv");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::trim(line).empty()) continue;
      auto row = detail::split_numbers<float>(line, dir / "features.tsv", lineno);
      if (rows == 0) dim = row.size();
      if (row.size() != dim)
        throw DataError("features.tsv:" + std::to_string(lineno) + ": row has " +
                        std::to_string(row.size()) + " values, expected " + std::to_string(dim));
      features.insert(features.end(), row.begin(), row.end());
      ++rows;
    }
  }

  std::size_t num_nodes = labels.size();
  std::size_t num_classes = 0;
  for (auto l : labels) num_classes = std::max<std::size_t>(num_classes, static_cast<std::size_t>(std::max(l, 0)) + 1);
  if (meta) {
    try {
      num_nodes = meta->at("num_nodes").get<std::size_t>();
      if (meta->contains("num_classes")) num_classes = meta->at("num_classes").get<std::size_t>();
      if (meta->contains("feature_dim") && rows > 0 && meta->at("feature_dim").get<std::size_t>() != dim)
        throw DataError("meta.json feature_dim " + meta->at("feature_dim").dump() +
                        " disagrees with features.tsv width " + std::to_string(dim));
      if (rows == 0 && meta->contains("feature_dim")) dim = meta->at("feature_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("meta.json: " + std::string(e.what()));
    }
  }
  if (rows != num_nodes)
    throw DataError("features.tsv has " + std::to_string(rows) + " rows but the bundle has " +
                    std::to_string(num_nodes) + " nodes");

  std::vector<std::pair<NodeId, NodeId>> edges;
  {
    auto in = detail::open_input(dir / "edges.tsv");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::trim(line).empty()) continue;
      auto ids = detail::split_numbers<std::int64_t>(line, dir / "edges.tsv", lineno);
      if (ids.size() != 2)
        throw DataError("edges.tsv:" + std::to_string(lineno) + ": expected two node ids");
      if (ids[0] < 0 || ids[1] < 0)
        throw DataError("edges.tsv:" + std::to_string(lineno) + ": negative node id");
      edges.emplace_back(static_cast<NodeId>(ids[0]), static_cast<NodeId>(ids[1]));
    }
  }
  return make_bundle(num_nodes, dim, num_classes, edges, std::move(features), std::move(labels));
}

inline void save_bundle(const GraphBundle& g, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::string out;
    for (auto [u, v] : undirected_edges(g)) {
      detail::append_number(out, u);
      out += '\t';
      detail::append_number(out, v);
      out += '\n';
    }
    std::ofstream(dir / "edges.tsv", std::ios::binary) << out;
  }
  {
    std::string out;
    for (NodeId v = 0; v < g.num_nodes; ++v) {
      auto row = g.feature_row(v);
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) out += '\t';
        detail::append_number(out, row[i]);
      }
      out += '\n';
    }
    std::ofstream(dir / "features.tsv", std::ios::binary) << out;
  }
  {
    std::string out;
    for (auto l : g.labels) {
      detail::append_number(out, l);
      out += '\n';
    }
    std::ofstream(dir / "labels.tsv", std::ios::binary) << out;
  }
  nlohmann::json meta{{"num_nodes", g.num_nodes},
                      {"feature_dim", g.feature_dim},
                      {"num_classes", g.num_classes}};
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump() << '\n';
}

/// Same node set, only edges with both endpoints in `members` survive.
inline GraphBundle induced_subgraph(const GraphBundle& g, std::span<const NodeId> members) {
  std::vector<char> in(g.num_nodes, 0);
  for (auto v : members) in[v] = 1;
  GraphBundle out = g;
  for (NodeId v = 0; v < g.num_nodes; ++v) {
    auto& adj = out.adjacency[v];
    if (!in[v]) {
      adj.clear();
      continue;
    }
    std::erase_if(adj, [&](NodeId u) { return !in[u]; });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { transductive, inductive };

struct InductiveGraphs {
  std::vector<NodeId> train_nodes;  // 50% of nodes
  std::vector<NodeId> val_nodes;    // train nodes plus another 10%
  std::vector<NodeId> test_nodes;   // every node

  bool operator==(const InductiveGraphs&) const = default;
};

struct SplitSpec {
  SplitMode mode = SplitMode::transductive;
  std::vector<NodeId> train_ids, val_ids, test_ids;  // sorted, pairwise disjoint
  std::optional<InductiveGraphs> inductive;

  bool operator==(const SplitSpec&) const = default;
};

namespace detail {
inline std::vector<NodeId> permutation(std::size_t n, std::uint64_t seed, std::uint64_t tag) {
  std::vector<NodeId> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<NodeId>(i);
  CounterRng rng(derive_key(seed, {stream::split, tag}));
  rng.shuffle(std::span<NodeId>(perm));
  return perm;
}
inline std::vector<NodeId> sorted(std::vector<NodeId> v) {
  std::sort(v.begin(), v.end());
  return v;
}
}  // namespace detail

inline SplitSpec make_transductive_split(const GraphBundle& g, double train_frac, double val_frac,
                                         std::uint64_t seed) {
  if (!(train_frac > 0.0) || !(val_frac >= 0.0) || !(train_frac + val_frac < 1.0))
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
  const auto n = g.num_nodes;
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_frac));
  if (n_train == 0) throw ConfigError("train fraction selects no nodes");
  auto perm = detail::permutation(n, seed, 1);
  SplitSpec s;
  s.train_ids = detail::sorted({perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train)});
  s.val_ids = detail::sorted({perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                              perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val)});
  s.test_ids = detail::sorted({perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end()});
  return s;
}

/// `per_class` train nodes from every class, then `val_total` validation nodes
/// drawn uniformly from the rest; everything else is test.
inline SplitSpec make_per_class_split(const GraphBundle& g, std::size_t per_class,
                                      std::size_t val_total, std::uint64_t seed) {
  if (per_class == 0) throw ConfigError("per-class split needs at least one train node per class");
  auto perm = detail::permutation(g.num_nodes, seed, 2);
  std::vector<std::size_t> taken(g.num_classes, 0);
  std::vector<NodeId> train, rest;
  for (auto v : perm) {
    auto c = static_cast<std::size_t>(g.labels[v]);
    if (taken[c] < per_class) {
      ++taken[c];
      train.push_back(v);
    } else {
      rest.push_back(v);
    }
  }
  for (std::size_t c = 0; c < g.num_classes; ++c)
    if (taken[c] < per_class)
      throw ConfigError("class " + std::to_string(c) + " has fewer than " +
                        std::to_string(per_class) + " nodes");
  if (val_total >= rest.size()) throw ConfigError("validation set would leave no test nodes");
  SplitSpec s;
  s.train_ids = detail::sorted(std::move(train));
  s.val_ids = detail::sorted({rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(val_total)});
  s.test_ids = detail::sorted({rest.begin() + static_cast<std::ptrdiff_t>(val_total), rest.end()});
  return s;
}

/// Fixed-percentage split for heterophilous graphs (50/25/25 by default).
inline SplitSpec make_fraction_split(const GraphBundle& g, double train_frac, double val_frac,
                                     std::uint64_t seed) {
  return make_transductive_split(g, train_frac, val_frac, seed);
}

/// Evolving-graph split: the train graph holds 50% of the nodes, the
/// validation graph another 10%, the test graph is the whole graph. Training
/// labels come from 10% of the train-graph nodes.
inline SplitSpec make_inductive_split(const GraphBundle& g, std::uint64_t seed) {
  const auto n = g.num_nodes;
  if (n < 10) throw ConfigError("inductive split needs at least 10 nodes");
  auto perm = detail::permutation(n, seed, 3);
  const auto n_train_graph = n / 2;
  const auto n_val_graph = static_cast<std::size_t>(std::floor(static_cast<double>(n) * 0.6));
  const auto n_train_labels =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(n_train_graph) * 0.1)));
  auto first = [&](std::size_t k) { return detail::sorted({perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k)}); };
  SplitSpec s;
  s.mode = SplitMode::inductive;
  s.inductive = InductiveGraphs{first(n_train_graph), first(n_val_graph), first(n)};
  s.train_ids = first(n_train_labels);
  s.val_ids = detail::sorted({perm.begin() + static_cast<std::ptrdiff_t>(n_train_graph),
                              perm.begin() + static_cast<std::ptrdiff_t>(n_val_graph)});
  s.test_ids = detail::sorted({perm.begin() + static_cast<std::ptrdiff_t>(n_val_graph), perm.end()});
  return s;
}

/// Adjacency views used for training, validation and test. Transductive
/// splits share the full graph across all three.
struct GraphViews {
  const GraphBundle* train = nullptr;
  const GraphBundle* val = nullptr;
  const GraphBundle* test = nullptr;
};

class SplitGraphs {
 public:
  SplitGraphs(const GraphBundle& g, const SplitSpec& split) : full_(&g) {
    if (split.mode == SplitMode::inductive && split.inductive) {
      train_ = induced_subgraph(g, split.inductive->train_nodes);
      val_ = induced_subgraph(g, split.inductive->val_nodes);
    }
  }
  GraphViews views() const {
    if (!train_) return {full_, full_, full_};
    return {&*train_, &*val_, full_};
  }

 private:
  const GraphBundle* full_;
  std::optional<GraphBundle> train_, val_;
};

// ---------------------------------------------------------------------------
// Neighbor sampling

struct SamplerConfig {
  std::size_t max_neighbors_per_hop = 25;
  double edge_keep_fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_neighbors_per_hop < 1) throw ConfigError("max_neighbors_per_hop must be >= 1");
    if (!(edge_keep_fraction > 0.0 && edge_keep_fraction <= 1.0))
      throw ConfigError("edge_keep_fraction must lie in (0, 1]");
  }
};

/// Uniform sample without replacement from `candidates`, keyed on
/// (seed, owner, round_tag). Returned ids are sorted.
inline std::vector<NodeId> sample_from(std::span<const NodeId> candidates, NodeId owner,
                                       const SamplerConfig& cfg, std::uint64_t round_tag) {
  const auto deg = candidates.size();
  auto keep = static_cast<std::size_t>(std::lround(static_cast<double>(deg) * cfg.edge_keep_fraction));
  const auto k = std::min({keep, cfg.max_neighbors_per_hop, deg});
  if (k == deg) return {candidates.begin(), candidates.end()};
  CounterRng rng(derive_key(cfg.seed, {stream::neighbors, owner, round_tag}));
  auto picked = rng.sample(candidates, k);
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline std::vector<NodeId> sample_neighbors(const GraphBundle& g, NodeId v, const SamplerConfig& cfg,
                                            std::uint64_t round_tag) {
  return sample_from(g.neighbors(v), v, cfg, round_tag);
}

}  // namespace retexo
