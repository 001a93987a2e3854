// retexo: run experiments, grid searches, synthetic graph generation and
// ledger reports from the command line.
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <retexo/retexo_all.hpp>

namespace fs = std::filesystem;
using namespace retexo;
using nlohmann::json;

namespace {

struct ConfigFlags {
  std::string config_file, dataset, synthetic, model, protocol, split, attribution;
  std::size_t layers = 0, rounds = 0, hidden = 0, heads = 0, pool_dim = 0, batch_cap = 0, neighbor_cap = 0,
              repeats = 0, patience = 30;
  double lr = 0, momentum = 0, weight_decay = 0, train_frac = 0, val_frac = 0, edge_keep = 1, contact_p = 1;
  std::uint64_t seed = 0;
  bool residual = false, cora_hparams = false;
  std::uint32_t attempts = 1;
  CLI::App* app = nullptr;
  CLI::Option* early_stop = nullptr;

  void attach(CLI::App* sub) {
    app = sub;
    sub->add_option("--config", config_file, "JSON experiment config; flags below override its fields");
    sub->add_option("--dataset", dataset, "bundle directory (edges.tsv, features.tsv, labels.tsv)");
    sub->add_option("--synthetic", synthetic, "synthetic preset instead of a bundle")->check(CLI::IsMember({"cora-like"}));
    sub->add_option("--model", model, "mlp | gcn | sage | gat")->check(CLI::IsMember({"mlp", "gcn", "sage", "gat"}));
    sub->add_option("--protocol", protocol, "baseline | retexo")->check(CLI::IsMember({"baseline", "retexo"}));
    sub->add_option("--split", split, "transductive | per-class | inductive");
    sub->add_option("--train-frac", train_frac);
    sub->add_option("--val-frac", val_frac);
    sub->add_option("--layers", layers, "GNN layers / message-passing rounds K");
    sub->add_option("--rounds", rounds, "training rounds per model");
    sub->add_option("--lr", lr, "learning rate");
    sub->add_option("--momentum", momentum);
    sub->add_option("--weight-decay", weight_decay);
    sub->add_option("--hidden", hidden);
    sub->add_option("--heads", heads);
    sub->add_option("--pool-dim", pool_dim);
    sub->add_flag("--residual", residual, "residual connections on intermediate layers");
    sub->add_option("--batch-cap", batch_cap, "clients sampled per round");
    sub->add_option("--neighbor-cap", neighbor_cap, "neighbors sampled per hop");
    sub->add_option("--edge-keep", edge_keep, "fraction of neighbors reachable per message-passing round");
    sub->add_option("--contact-probability", contact_p, "per-attempt success of a client-to-client contact");
    sub->add_option("--contact-attempts", attempts, "contact attempts before a message-passing round times out");
    early_stop = sub->add_option("--early-stop", patience, "enable early stopping with this patience")
                     ->expected(0, 1)
                     ->default_str("30");
    sub->add_option("--seed", seed);
    sub->add_option("--repeats", repeats, "number of seeds (seed, seed+1, ...)");
    sub->add_option("--attribution", attribution, "charge c2c bytes to the sender or receiver")
        ->check(CLI::IsMember({"sender", "receiver"}));
    sub->add_flag("--cora-hparams", cora_hparams, "use the tuned learning rate and hidden size for the model");
  }

  bool given(const char* name) const { return app->count(name) > 0; }

  experiment::ExperimentConfig resolve() const {
    experiment::ExperimentConfig c;
    if (!config_file.empty()) c = experiment::load_config(config_file);
    if (given("--dataset")) c.dataset = dataset;
    if (given("--synthetic")) c.synthetic = experiment::synth_from_json(json(synthetic));
    if (given("--model")) c.arch = nn::arch_from_string(model);
    if (given("--protocol")) c.protocol = experiment::protocol_from_string(protocol);
    if (cora_hparams) experiment::apply_cora_hyperparameters(c);
    if (given("--split")) c.split.mode = split;
    if (given("--train-frac")) c.split.train_frac = train_frac;
    if (given("--val-frac")) c.split.val_frac = val_frac;
    auto& t = c.train;
    if (given("--layers")) t.num_layers = layers;
    if (given("--rounds")) t.rounds = rounds;
    if (given("--lr")) t.optimizer.learning_rate = lr;
    if (given("--momentum")) t.optimizer.momentum = momentum;
    if (given("--weight-decay")) t.optimizer.weight_decay = weight_decay;
    if (given("--hidden")) t.hidden = hidden;
    if (given("--heads")) t.heads = heads;
    if (given("--pool-dim")) t.pool_dim = pool_dim;
    if (given("--residual")) t.residual = residual;
    if (given("--batch-cap")) t.batch_cap = batch_cap;
    if (given("--neighbor-cap")) t.neighbor_cap = neighbor_cap;
    if (given("--edge-keep")) t.edge_keep = edge_keep;
    if (given("--contact-probability")) t.contact_probability = contact_p;
    if (given("--contact-attempts")) t.contact_attempts = attempts;
    if (early_stop->count()) t.patience = patience;
    if (given("--seed")) t.seed = seed;
    if (given("--repeats")) c.repeats = repeats;
    if (given("--attribution")) t.attribution = net::attribution_from_string(attribution);
    c.validate();
    return c;
  }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

int cmd_run(const ConfigFlags& flags, const std::string& out_dir, bool bits, bool events) {
  auto cfg = flags.resolve();
  if (events) cfg.train.log_events = true;
  const auto report = experiment::run_experiment(cfg);
  const auto& ledger = report.ledger();
  const auto& c2c = ledger.channel(net::Channel::client_to_client);
  const auto& c2s = ledger.channel(net::Channel::client_to_server);
  std::cout << cfg.label() << ": micro-F1 " << report.mean_accuracy << " +/- " << report.std_accuracy << " over "
            << report.runs.size() << " seed(s)\n"
            << "  c2c " << static_cast<double>(c2c.bytes) / net::kBytesPerMB << " MB, c2s "
            << static_cast<double>(c2s.bytes) / net::kBytesPerMB << " MB (first seed)\n";
  if (bits)
    std::cout << "  c2c " << static_cast<double>(c2c.bytes) * 8 / net::kBytesPerMB << " Mb, c2s "
              << static_cast<double>(c2s.bytes) * 8 / net::kBytesPerMB << " Mb\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "report.json", report.to_json(bits).dump(2) + "\n");
    write_file(fs::path(out_dir) / "clients.csv", net::report_csv(ledger));
    if (cfg.train.log_events) {
      std::ofstream ev(fs::path(out_dir) / "events.csv");
      net::write_event_log(ledger, ev);
    }
    experiment::emit_figures_data(std::span(&report, 1), fs::path(out_dir) / "figures");
    std::cout << "  wrote " << out_dir << "\n";
  }
  return 0;
}

int cmd_grid(const ConfigFlags& flags, const std::vector<double>& lrs, const std::vector<std::size_t>& hiddens) {
  experiment::GridSpace space;
  space.base = flags.resolve();
  if (!lrs.empty()) space.learning_rates = lrs;
  if (!hiddens.empty()) space.hidden_sizes = hiddens;
  const auto res = experiment::grid_search(space);
  json points = json::array();
  for (const auto& p : res.points)
    points.push_back({{"learning_rate", p.learning_rate}, {"hidden", p.hidden}, {"val_loss", p.val_loss}});
  std::cout << json{{"points", points},
                    {"best", {{"learning_rate", res.best_point.learning_rate}, {"hidden", res.best_point.hidden},
                              {"val_loss", res.best_point.val_loss}}},
                    {"config", experiment::to_json(res.best)}}
                   .dump(2)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retexo and end-to-end GNN training over fully-distributed graphs, with communication accounting"};
  app.require_subcommand(1);

  ConfigFlags run_flags, grid_flags;
  std::string out_dir;
  bool bits = false, events = false;
  auto* run = app.add_subcommand("run", "train and evaluate one configuration");
  run_flags.attach(run);
  run->add_option("--out", out_dir, "directory for report.json, clients.csv, events.csv and figure data");
  run->add_flag("--bits", bits, "also print totals in megabits");
  run->add_flag("--events", events, "record the per-message event log");

  std::vector<double> lrs;
  std::vector<std::size_t> hiddens;
  auto* grid = app.add_subcommand("grid", "grid search over learning rate and hidden size");
  grid_flags.attach(grid);
  grid->add_option("--lrs", lrs, "learning rates (default 0.005 0.01 0.025 0.05 0.075 0.1)");
  grid->add_option("--hiddens", hiddens, "hidden sizes (default 64 128 256)");

  SynthSpec spec;
  std::string synth_out, preset, features = "gaussian";
  auto* synth = app.add_subcommand("synth", "write a stochastic-block-model graph bundle");
  synth->add_option("--out", synth_out, "output bundle directory")->required();
  synth->add_option("--preset", preset)->check(CLI::IsMember({"cora-like"}));
  synth->add_option("--nodes", spec.nodes);
  synth->add_option("--classes", spec.classes);
  synth->add_option("--homophily", spec.homophily);
  synth->add_option("--feature-dim", spec.feature_dim);
  synth->add_option("--avg-degree", spec.avg_degree);
  synth->add_option("--edges", spec.exact_edges, "exact undirected edge count");
  synth->add_option("--features", features)->check(CLI::IsMember({"gaussian", "bag-of-words"}));
  synth->add_option("--signal", spec.signal);
  synth->add_option("--words-per-node", spec.words_per_node);
  synth->add_option("--seed", spec.seed);

  std::string events_file, format = "csv", attribution = "sender";
  std::size_t clients = 0;
  bool report_bits = false;
  auto* rep = app.add_subcommand("report", "rebuild ledger totals from an event log");
  rep->add_option("--events", events_file, "events.csv written by `run --events`")->required();
  rep->add_option("--clients", clients, "number of clients (nodes)")->required();
  rep->add_option("--format", format, "csv | json");
  rep->add_option("--attribution", attribution)->check(CLI::IsMember({"sender", "receiver"}));
  rep->add_flag("--bits", report_bits);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(run_flags, out_dir, bits, events);
    if (*grid) return cmd_grid(grid_flags, lrs, hiddens);
    if (*synth) {
      if (!preset.empty()) {
        const auto seed = spec.seed;
        spec = cora_like_spec(seed);
      } else {
        spec.features = features == "gaussian" ? FeatureModel::gaussian : FeatureModel::bag_of_words;
      }
      const auto g = synth_graph(spec);
      save_bundle(g, synth_out);
      std::cout << "wrote " << synth_out << ": " << g.num_nodes << " nodes, " << g.directed_edge_entries() / 2
                << " edges, " << g.feature_dim << " features, " << g.num_classes << " classes\n";
      return 0;
    }
    if (*rep) {
      std::ifstream in(events_file);
      if (!in) throw DataError("cannot open " + events_file);
      const auto msgs = net::read_event_log(in);
      const auto ledger = net::replay(msgs, clients, net::attribution_from_string(attribution));
      std::cout << net::report(ledger, format, nullptr, 0, report_bits);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
