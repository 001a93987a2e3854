#pragma once

// Experiment orchestration: a JSON-described run configuration, repeated
// seeded runs with test micro-F1, hyperparameter grid search, and figure
// data files.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "baseline.hpp"
#include "errors.hpp"
#include "federated.hpp"
#include "graph.hpp"
#include "netsim.hpp"
#include "params.hpp"
#include "retexo.hpp"
#include "synth.hpp"

namespace retexo::experiment {

using nlohmann::json;

enum class Protocol { baseline, retexo };

inline std::string_view to_string(Protocol p) { return p == Protocol::baseline ? "baseline" : "retexo"; }
inline Protocol protocol_from_string(std::string_view s) {
  if (s == "baseline") return Protocol::baseline;
  if (s == "retexo") return Protocol::retexo;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (expected baseline or retexo)");
}

struct SplitConfig {
  std::string mode = "transductive";  // transductive | per-class | inductive
  double train_frac = 0.1, val_frac = 0.1;
  std::size_t per_class = 40, val_total = 280;
};

struct ExperimentConfig {
  std::string dataset;                  // bundle directory; empty means `synthetic`
  std::optional<SynthSpec> synthetic;
  nn::Arch arch = nn::Arch::gcn;
  Protocol protocol = Protocol::retexo;
  SplitConfig split;
  protocol::TrainConfig train;
  std::size_t repeats = 5;

  /// Retexo run over the plain MLP means K = 0.
  protocol::TrainConfig resolved_train() const {
    auto t = train;
    if (arch == nn::Arch::mlp) t.num_layers = 0;
    return t;
  }

  std::string label() const {
    std::string s = arch == nn::Arch::mlp ? "mlp" : std::string(protocol == Protocol::retexo ? "retexo_" : "") +
                                                        std::string(nn::to_string(arch));
    return s + "_" + (train.patience ? std::string("es") : std::to_string(train.rounds));
  }

  void validate() const {
    if (arch == nn::Arch::retexo_block) throw ConfigError("model must be one of mlp, gcn, sage, gat");
    if (dataset.empty() && !synthetic) throw ConfigError("no dataset: set \"dataset\" to a bundle directory or give \"synthetic\"");
    if (repeats == 0) throw ConfigError("repeats must be at least 1");
    if (split.mode != "transductive" && split.mode != "per-class" && split.mode != "inductive")
      throw ConfigError("unknown split mode '" + split.mode + "'");
    resolved_train().validate();
    if (synthetic) synthetic->validate();
  }
};

// ---------------------------------------------------------------------------
// JSON

inline json synth_to_json(const SynthSpec& s) {
  return {{"nodes", s.nodes},
          {"classes", s.classes},
          {"homophily", s.homophily},
          {"feature_dim", s.feature_dim},
          {"avg_degree", s.avg_degree},
          {"seed", s.seed},
          {"features", s.features == FeatureModel::gaussian ? "gaussian" : "bag-of-words"},
          {"signal", s.signal},
          {"words_per_node", s.words_per_node},
          {"edges", s.exact_edges}};
}

namespace detail {

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (auto n : known) ok = ok || k == n;
    if (!ok) throw ConfigError("unknown config field '" + k + "' in " + where);
  }
}

}  // namespace detail

inline SynthSpec synth_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "cora-like") return cora_like_spec();
    throw ConfigError("unknown synthetic preset '" + j.get<std::string>() + "'");
  }
  if (!j.is_object()) throw ConfigError("\"synthetic\" must be an object or a preset name");
  detail::reject_unknown(j, {"preset", "nodes", "classes", "homophily", "feature_dim", "avg_degree", "seed", "features",
                             "signal", "words_per_node", "edges"},
                         "synthetic");
  SynthSpec s;
  if (j.contains("preset")) s = synth_from_json(j.at("preset"));
  detail::take(j, "nodes", s.nodes);
  detail::take(j, "classes", s.classes);
  detail::take(j, "homophily", s.homophily);
  detail::take(j, "feature_dim", s.feature_dim);
  detail::take(j, "avg_degree", s.avg_degree);
  detail::take(j, "seed", s.seed);
  detail::take(j, "signal", s.signal);
  detail::take(j, "words_per_node", s.words_per_node);
  detail::take(j, "edges", s.exact_edges);
  if (j.contains("features")) {
    const auto f = j.at("features").get<std::string>();
    if (f == "gaussian") s.features = FeatureModel::gaussian;
    else if (f == "bag-of-words") s.features = FeatureModel::bag_of_words;
    else throw ConfigError("unknown feature model '" + f + "'");
  }
  return s;
}

inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json j = {{"dataset", c.dataset},
            {"model", nn::to_string(c.arch)},
            {"protocol", to_string(c.protocol)},
            {"split",
             {{"mode", c.split.mode},
              {"train_frac", c.split.train_frac},
              {"val_frac", c.split.val_frac},
              {"per_class", c.split.per_class},
              {"val_total", c.split.val_total}}},
            {"layers", t.num_layers},
            {"rounds", t.rounds},
            {"learning_rate", t.optimizer.learning_rate},
            {"momentum", t.optimizer.momentum},
            {"weight_decay", t.optimizer.weight_decay},
            {"hidden", t.hidden},
            {"heads", t.heads},
            {"pool_dim", t.pool_dim},
            {"residual", t.residual},
            {"batch_cap", t.batch_cap},
            {"neighbor_cap", t.neighbor_cap},
            {"edge_keep", t.edge_keep},
            {"contact_probability", t.contact_probability},
            {"contact_attempts", t.contact_attempts},
            {"patience", t.patience},
            {"seed", t.seed},
            {"attribution", net::to_string(t.attribution)},
            {"log_events", t.log_events},
            {"repeats", c.repeats}};
  j["synthetic"] = c.synthetic ? synth_to_json(*c.synthetic) : json(nullptr);
  return j;
}

/// Every field is optional; missing ones keep their defaults.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_unknown(j, {"dataset", "synthetic", "model", "protocol", "split", "layers", "rounds", "learning_rate",
                             "momentum", "weight_decay", "hidden", "heads", "pool_dim", "residual", "batch_cap",
                             "neighbor_cap", "edge_keep", "contact_probability", "contact_attempts", "patience", "seed",
                             "attribution", "log_events", "repeats"},
                         "config");
  auto& t = c.train;
  detail::take(j, "dataset", c.dataset);
  if (j.contains("synthetic")) {
    if (j.at("synthetic").is_null()) c.synthetic.reset();
    else c.synthetic = synth_from_json(j.at("synthetic"));
  }
  if (j.contains("model")) c.arch = nn::arch_from_string(j.at("model").get<std::string>());
  if (j.contains("protocol")) c.protocol = protocol_from_string(j.at("protocol").get<std::string>());
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::reject_unknown(s, {"mode", "train_frac", "val_frac", "per_class", "val_total"}, "split");
    detail::take(s, "mode", c.split.mode);
    detail::take(s, "train_frac", c.split.train_frac);
    detail::take(s, "val_frac", c.split.val_frac);
    detail::take(s, "per_class", c.split.per_class);
    detail::take(s, "val_total", c.split.val_total);
  }
  detail::take(j, "layers", t.num_layers);
  detail::take(j, "rounds", t.rounds);
  detail::take(j, "learning_rate", t.optimizer.learning_rate);
  detail::take(j, "momentum", t.optimizer.momentum);
  detail::take(j, "weight_decay", t.optimizer.weight_decay);
  detail::take(j, "hidden", t.hidden);
  detail::take(j, "heads", t.heads);
  detail::take(j, "pool_dim", t.pool_dim);
  detail::take(j, "residual", t.residual);
  detail::take(j, "batch_cap", t.batch_cap);
  detail::take(j, "neighbor_cap", t.neighbor_cap);
  detail::take(j, "edge_keep", t.edge_keep);
  detail::take(j, "contact_probability", t.contact_probability);
  detail::take(j, "contact_attempts", t.contact_attempts);
  detail::take(j, "patience", t.patience);
  detail::take(j, "seed", t.seed);
  detail::take(j, "log_events", t.log_events);
  detail::take(j, "repeats", c.repeats);
  if (j.contains("attribution")) t.attribution = net::attribution_from_string(j.at("attribution").get<std::string>());
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
  }
}

/// Learning rate and hidden size tuned on Cora for each model.
inline void apply_cora_hyperparameters(ExperimentConfig& c) {
  struct Entry { nn::Arch arch; Protocol protocol; double lr; std::size_t hidden; };
  static constexpr Entry table[] = {
      {nn::Arch::mlp, Protocol::retexo, 0.1, 256},     {nn::Arch::mlp, Protocol::baseline, 0.1, 256},
      {nn::Arch::gcn, Protocol::baseline, 0.075, 128}, {nn::Arch::gcn, Protocol::retexo, 0.005, 256},
      {nn::Arch::sage, Protocol::baseline, 0.025, 256}, {nn::Arch::sage, Protocol::retexo, 0.005, 256},
      {nn::Arch::gat, Protocol::baseline, 0.1, 256},   {nn::Arch::gat, Protocol::retexo, 0.005, 256},
  };
  for (const auto& e : table)
    if (e.arch == c.arch && e.protocol == c.protocol) {
      c.train.optimizer.learning_rate = e.lr;
      c.train.hidden = e.hidden;
      c.train.num_layers = 2;
      return;
    }
}

// ---------------------------------------------------------------------------
// Runs

inline GraphBundle load_dataset(const ExperimentConfig& c) {
  if (!c.dataset.empty()) return load_bundle(c.dataset);
  if (!c.synthetic) throw ConfigError("no dataset configured");
  return synth_graph(*c.synthetic);
}

inline SplitSpec make_split(const GraphBundle& g, const SplitConfig& s, std::uint64_t seed) {
  if (s.mode == "transductive") return make_transductive_split(g, s.train_frac, s.val_frac, seed);
  if (s.mode == "per-class") return make_per_class_split(g, s.per_class, s.val_total, seed);
  if (s.mode == "inductive") return make_inductive_split(g, seed);
  throw ConfigError("unknown split mode '" + s.mode + "'");
}

struct SeedRun {
  std::uint64_t seed = 0;
  double test_accuracy = 0;
  double val_loss = 0;  // best validation loss of the final model
  std::vector<protocol::StageHistory> stages;
  net::CommLedger ledger;
  std::vector<nn::ModelParams> models;  // Retexo: MLP_0..MLP_K; baseline: the GNN
};

struct RunReport {
  ExperimentConfig config;
  std::vector<SeedRun> runs;
  double mean_accuracy = 0, std_accuracy = 0;
  double wall_seconds = 0;

  const net::CommLedger& ledger() const { return runs.front().ledger; }

  /// Everything but wall time is a deterministic function of the config.
  json to_json(bool bits = false, bool with_wall_time = true) const {
    json runs_j = json::array();
    for (const auto& r : runs) {
      json stages = json::array();
      for (const auto& s : r.stages)
        stages.push_back({{"rounds_run", s.rounds_run},
                          {"best_round", s.best_round},
                          {"best_val_loss", std::isnan(s.best_val_loss) ? json(nullptr) : json(s.best_val_loss)},
                          {"stopped_early", s.stopped_early},
                          {"val_loss", s.val_loss},
                          {"val_accuracy", s.val_accuracy},
                          {"train_loss", s.train_loss}});
      runs_j.push_back({{"seed", r.seed},
                        {"micro_f1", r.test_accuracy},
                        {"val_loss", std::isnan(r.val_loss) ? json(nullptr) : json(r.val_loss)},
                        {"stages", stages},
                        {"ledger", net::report_json(r.ledger, nullptr, r.seed, bits)}});
    }
    json j = {{"config", experiment::to_json(config)},
              {"micro_f1", {{"mean", mean_accuracy}, {"std", std_accuracy}, {"repeats", runs.size()}}},
              {"runs", runs_j}};
    if (with_wall_time) j["wall_seconds"] = wall_seconds;
    return j;
  }
};

/// One seeded run on an already-loaded graph.
inline SeedRun run_seed(const ExperimentConfig& c, const GraphBundle& g, std::uint64_t seed) {
  auto train = c.resolved_train();
  train.seed = seed;
  const auto split = make_split(g, c.split, seed);
  SplitGraphs graphs(g, split);
  const auto views = graphs.views();
  SeedRun out;
  out.seed = seed;
  if (c.arch == nn::Arch::mlp || c.protocol == Protocol::retexo) {
    const auto agg = c.arch == nn::Arch::mlp ? nn::Aggregator::mean : nn::aggregator_of(c.arch);
    auto res = protocol::train_retexo(views, split, agg, train);
    const auto clients = protocol::ClientSets::of(g, split);
    out.test_accuracy =
        protocol::evaluate_retexo(res.models, *views.test, clients.test_graph, split.test_ids, train).accuracy();
    out.stages = std::move(res.stages);
    out.ledger = std::move(res.ledger);
    out.models = std::move(res.models);
  } else {
    auto res = protocol::train_baseline(views, split, c.arch, train);
    out.test_accuracy =
        protocol::evaluate_gnn(res.model, *views.test, split.test_ids, train, protocol::kInferenceTag).accuracy();
    out.stages.push_back(std::move(res.history));
    out.ledger = std::move(res.ledger);
    out.models.push_back(std::move(res.model));
  }
  out.val_loss = out.stages.back().best_val_loss;
  return out;
}

/// Seeds seed, seed+1, ..., seed+repeats-1; each re-draws the split and the
/// model initialization.
inline RunReport run_experiment(const ExperimentConfig& c, const GraphBundle& g) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config = c;
  for (std::size_t i = 0; i < c.repeats; ++i) rep.runs.push_back(run_seed(c, g, c.train.seed + i));
  double sum = 0;
  for (const auto& r : rep.runs) sum += r.test_accuracy;
  rep.mean_accuracy = sum / static_cast<double>(rep.runs.size());
  if (rep.runs.size() > 1) {
    double sq = 0;
    for (const auto& r : rep.runs) sq += (r.test_accuracy - rep.mean_accuracy) * (r.test_accuracy - rep.mean_accuracy);
    rep.std_accuracy = std::sqrt(sq / static_cast<double>(rep.runs.size() - 1));
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline RunReport run_experiment(const ExperimentConfig& c) {
  c.validate();
  return run_experiment(c, load_dataset(c));
}

// ---------------------------------------------------------------------------
// Grid search

struct GridSpace {
  ExperimentConfig base;
  std::vector<double> learning_rates{0.005, 0.01, 0.025, 0.05, 0.075, 0.1};
  std::vector<std::size_t> hidden_sizes{64, 128, 256};
};

struct GridPoint {
  double learning_rate = 0;
  std::size_t hidden = 0;
  double val_loss = 0;
};

struct GridResult {
  ExperimentConfig best;
  GridPoint best_point;
  std::vector<GridPoint> points;
};

/// Lowest validation loss wins; ties go to the lower learning rate, then the
/// smaller hidden size.
inline bool grid_better(const GridPoint& a, const GridPoint& b) {
  return std::tuple(a.val_loss, a.learning_rate, a.hidden) < std::tuple(b.val_loss, b.learning_rate, b.hidden);
}

inline GridResult select_best(const ExperimentConfig& base, std::vector<GridPoint> points) {
  if (points.empty()) throw ConfigError("empty search space");
  GridResult r;
  r.points = std::move(points);
  r.best_point = r.points.front();
  for (const auto& p : r.points)
    if (grid_better(p, r.best_point)) r.best_point = p;
  r.best = base;
  r.best.train.optimizer.learning_rate = r.best_point.learning_rate;
  r.best.train.hidden = r.best_point.hidden;
  return r;
}

/// Evaluates every (learning rate, hidden size) pair with a single seed.
inline GridResult grid_search(const GridSpace& space, const GraphBundle& g) {
  if (space.learning_rates.empty() || space.hidden_sizes.empty()) throw ConfigError("empty search space");
  std::vector<GridPoint> points;
  for (double lr : space.learning_rates)
    for (auto h : space.hidden_sizes) {
      auto c = space.base;
      c.repeats = 1;
      c.train.optimizer.learning_rate = lr;
      c.train.hidden = h;
      c.validate();
      const auto run = run_seed(c, g, c.train.seed);
      if (std::isnan(run.val_loss)) throw ConfigError("grid search needs validation nodes");
      points.push_back({lr, h, run.val_loss});
    }
  return select_best(space.base, std::move(points));
}

inline GridResult grid_search(const GridSpace& space) { return grid_search(space, load_dataset(space.base)); }

// ---------------------------------------------------------------------------
// Figure data

/// One `Sno,node` CSV per report: every client's total traffic in MB
/// (client-to-client plus client-to-server, first seed), largest first.
inline std::vector<std::filesystem::path> emit_figures_data(std::span<const RunReport> reports,
                                                            const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  if (reports.empty()) return written;
  std::filesystem::create_directories(dir);
  for (const auto& r : reports) {
    auto name = r.config.label();
    auto path = dir / (name + ".csv");
    for (int k = 2; std::find(written.begin(), written.end(), path) != written.end(); ++k)
      path = dir / (name + "_" + std::to_string(k) + ".csv");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "Sno,node\n";
    const auto& ledger = r.ledger();
    std::size_t i = 1;
    for (auto v : net::clients_by_total(ledger))
      out << i++ << ',' << static_cast<double>(ledger.client(v).total()) / net::kBytesPerMB << '\n';
    written.push_back(path);
  }
  return written;
}

}  // namespace retexo::experiment
