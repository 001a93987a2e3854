#pragma once

// Simulated communication: typed messages, the per-client byte ledger, the
// contact schedule deciding which client pairs reach each other, and report
// writers.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "graph.hpp"
#include "rng.hpp"

namespace retexo::net {

using Endpoint = std::uint32_t;
inline constexpr Endpoint kServer = std::numeric_limits<Endpoint>::max();

inline constexpr std::uint64_t kBytesPerFloat = 4;
inline constexpr std::uint64_t kHeaderBytes = 8;
inline constexpr double kBytesPerMB = 1e6;

enum class Channel : std::uint8_t { client_to_client, client_to_server };

enum class Kind : std::uint8_t {
  model_share,   // baseline: layers a neighbor needs to compute for the train client
  repr0,         // baseline: raw features
  repr1,         // baseline: hidden representations
  grad_factor,   // baseline: backward-pass factors
  server_model,  // model sent to a sampled client
  grad_up,       // updated model returned by a train client
  sync,          // Retexo: previous trained model before a message-passing round
  embedding,     // Retexo: intermediate embedding shared with a neighbor
  val_report,    // validation loss and correctness
};
inline constexpr std::size_t kNumKinds = 9;

inline constexpr std::array<std::string_view, kNumKinds> kKindNames = {
    "model-share", "repr0", "repr1", "grad-factor", "server-model", "grad-up", "sync", "embedding", "val-report"};

inline std::string_view to_string(Kind k) { return kKindNames[static_cast<std::size_t>(k)]; }
inline std::string_view to_string(Channel c) { return c == Channel::client_to_client ? "c2c" : "c2s"; }

inline Kind kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kNumKinds; ++i)
    if (kKindNames[i] == s) return static_cast<Kind>(i);
  throw DataError("unknown message kind '" + std::string(s) + "'");
}

struct Message {
  std::uint32_t round = 0;
  Endpoint src = 0, dst = 0;
  Kind kind = Kind::embedding;
  std::uint64_t float_count = 0;

  Channel channel() const {
    return src == kServer || dst == kServer ? Channel::client_to_server : Channel::client_to_client;
  }
  std::uint64_t payload_bytes() const { return float_count * kBytesPerFloat; }
  std::uint64_t bytes() const { return payload_bytes() + kHeaderBytes; }

  auto key() const { return std::tuple(round, src, dst, static_cast<int>(kind), float_count); }
  bool operator==(const Message&) const = default;
};

/// Which client a client-to-client message is charged to. Client-to-server
/// traffic is always charged to the client end.
enum class Attribution { sender, receiver };

inline std::string_view to_string(Attribution a) { return a == Attribution::sender ? "sender" : "receiver"; }
inline Attribution attribution_from_string(std::string_view s) {
  if (s == "sender") return Attribution::sender;
  if (s == "receiver") return Attribution::receiver;
  throw ConfigError("unknown attribution '" + std::string(s) + "'");
}

struct ClientCounters {
  std::uint64_t c2c = 0, c2s = 0;            // attributed bytes
  std::uint64_t c2c_sent = 0, c2c_received = 0;
  std::uint64_t total() const { return c2c + c2s; }
  bool operator==(const ClientCounters&) const = default;
};

struct Totals {
  std::uint64_t bytes = 0, payload = 0, messages = 0;
  bool operator==(const Totals&) const = default;
};

class CommLedger {
 public:
  CommLedger() = default;
  explicit CommLedger(std::size_t num_clients, Attribution attribution = Attribution::sender, bool log_events = false)
      : attribution_(attribution), log_events_(log_events), clients_(num_clients) {}

  void record(const Message& m) {
    const bool src_server = m.src == kServer, dst_server = m.dst == kServer;
    if (src_server && dst_server) throw std::invalid_argument("server cannot message itself");
    if ((!src_server && m.src >= clients_.size()) || (!dst_server && m.dst >= clients_.size()))
      throw std::invalid_argument("message endpoint outside the client range");
    if (m.src == m.dst) throw std::invalid_argument("client cannot message itself");
    const auto b = m.bytes();
    if (m.channel() == Channel::client_to_client) {
      auto& charged = clients_[attribution_ == Attribution::sender ? m.src : m.dst];
      charged.c2c += b;
      clients_[m.src].c2c_sent += b;
      clients_[m.dst].c2c_received += b;
      add(channel_[0], m);
    } else {
      clients_[src_server ? m.dst : m.src].c2s += b;
      add(channel_[1], m);
    }
    add(kinds_[static_cast<std::size_t>(m.kind)], m);
    if (log_events_) events_.push_back(m);
  }

  /// Records a batch in a canonical (round, src, dst, kind) order, so batches
  /// assembled concurrently or in any order merge identically.
  void record_batch(std::vector<Message> batch) {
    std::stable_sort(batch.begin(), batch.end(), [](const Message& a, const Message& b) { return a.key() < b.key(); });
    for (const auto& m : batch) record(m);
  }

  std::size_t num_clients() const { return clients_.size(); }
  Attribution attribution() const { return attribution_; }
  const ClientCounters& client(std::size_t v) const { return clients_.at(v); }
  const std::vector<ClientCounters>& clients() const { return clients_; }
  const Totals& channel(Channel c) const { return channel_[static_cast<std::size_t>(c)]; }
  const Totals& kind(Kind k) const { return kinds_[static_cast<std::size_t>(k)]; }
  const std::vector<Message>& events() const { return events_; }
  bool logging() const { return log_events_; }

  /// Number of distinct rounds carrying client-to-client traffic (needs the event log).
  std::size_t c2c_rounds() const {
    std::vector<std::uint32_t> rounds;
    for (const auto& m : events_)
      if (m.channel() == Channel::client_to_client) rounds.push_back(m.round);
    std::sort(rounds.begin(), rounds.end());
    return static_cast<std::size_t>(std::unique(rounds.begin(), rounds.end()) - rounds.begin());
  }

  bool operator==(const CommLedger&) const = default;

 private:
  static void add(Totals& t, const Message& m) {
    t.bytes += m.bytes();
    t.payload += m.payload_bytes();
    ++t.messages;
  }

  Attribution attribution_ = Attribution::sender;
  bool log_events_ = false;
  std::vector<ClientCounters> clients_;
  std::array<Totals, 2> channel_{};
  std::array<Totals, kNumKinds> kinds_{};
  std::vector<Message> events_;
};

// ---------------------------------------------------------------------------
// Contact schedule

/// Whether two clients reach each other in a message-passing round. Contacts
/// are symmetric and keyed on (seed, unordered pair, round).
struct ContactSchedule {
  enum class Model { always, probabilistic, edge_drop };

  Model model = Model::always;
  double probability = 1.0;  // per-attempt success (probabilistic) or kept fraction (edge_drop)
  std::uint64_t seed = 0;
  std::uint32_t attempts = 1;  // timeout, in contact attempts

  static ContactSchedule always() { return {}; }
  static ContactSchedule probabilistic(double p, std::uint64_t seed, std::uint32_t attempts = 1) {
    return {Model::probabilistic, p, seed, attempts};
  }
  static ContactSchedule edge_drop(double keep, std::uint64_t seed) { return {Model::edge_drop, keep, seed, 1}; }

  void validate() const {
    if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("contact probability must lie in [0, 1]");
    if (attempts == 0) throw ConfigError("at least one contact attempt is required");
  }

  bool contact(NodeId u, NodeId v, std::uint64_t round) const {
    if (model == Model::always) return true;
    const auto lo = std::min(u, v), hi = std::max(u, v);
    if (model == Model::edge_drop) {
      if (probability >= 1.0) return true;
      CounterRng rng(derive_key(seed, {stream::contact, lo, hi, round}));
      return rng.uniform() < probability;
    }
    CounterRng rng(derive_key(seed, {stream::contact, lo, hi, round, 1}));
    for (std::uint32_t a = 0; a < attempts; ++a)
      if (rng.uniform() < probability) return true;
    return false;
  }
};

inline bool contact(const ContactSchedule& s, NodeId u, NodeId v, std::uint64_t round) { return s.contact(u, v, round); }

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { csv, json };

inline ReportFormat report_format_from_string(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + std::string(s) + "'");
}

/// Client ids ordered by descending total bytes, ties by ascending id.
inline std::vector<std::size_t> clients_by_total(const CommLedger& ledger) {
  std::vector<std::size_t> order(ledger.num_clients());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ledger.client(a).total() > ledger.client(b).total();
  });
  return order;
}

/// `client_id,c2c_bytes,c2s_bytes` rows by descending total, then a `total` row.
inline std::string report_csv(const CommLedger& ledger) {
  std::ostringstream out;
  out << "client_id,c2c_bytes,c2s_bytes\n";
  std::uint64_t c2c = 0, c2s = 0;
  for (auto v : clients_by_total(ledger)) {
    const auto& c = ledger.client(v);
    out << v << ',' << c.c2c << ',' << c.c2s << '\n';
    c2c += c.c2c;
    c2s += c.c2s;
  }
  out << "total," << c2c << ',' << c2s << '\n';
  return out.str();
}

inline nlohmann::json totals_json(const Totals& t, bool bits) {
  nlohmann::json j = {{"bytes", t.bytes},
                      {"payload_bytes", t.payload},
                      {"messages", t.messages},
                      {"mb", static_cast<double>(t.bytes) / kBytesPerMB}};
  if (bits) j["mbit"] = static_cast<double>(t.bytes) * 8 / kBytesPerMB;
  return j;
}

inline nlohmann::json report_json(const CommLedger& ledger, const nlohmann::json& config = nullptr,
                                  std::uint64_t seed = 0, bool bits = false) {
  nlohmann::json kinds = nlohmann::json::object();
  for (std::size_t k = 0; k < kNumKinds; ++k)
    kinds[std::string(kKindNames[k])] = totals_json(ledger.kind(static_cast<Kind>(k)), bits);
  return {{"channels",
           {{"c2c", totals_json(ledger.channel(Channel::client_to_client), bits)},
            {"c2s", totals_json(ledger.channel(Channel::client_to_server), bits)}}},
          {"kinds", kinds},
          {"attribution", to_string(ledger.attribution())},
          {"clients", ledger.num_clients()},
          {"config", config},
          {"seed", seed}};
}

inline std::string report(const CommLedger& ledger, std::string_view format, const nlohmann::json& config = nullptr,
                          std::uint64_t seed = 0, bool bits = false) {
  switch (report_format_from_string(format)) {
    case ReportFormat::csv: return report_csv(ledger);
    case ReportFormat::json: return report_json(ledger, config, seed, bits).dump(2) + "\n";
  }
  return {};
}

// ---------------------------------------------------------------------------
// Event log: `round,channel,src,dst,kind,bytes`, one line per message.

namespace detail {
inline std::string endpoint_name(Endpoint e) { return e == kServer ? "server" : std::to_string(e); }
inline Endpoint parse_endpoint(const std::string& s) {
  if (s == "server") return kServer;
  return static_cast<Endpoint>(std::stoul(s));
}
}  // namespace detail

inline void write_event_log(const CommLedger& ledger, std::ostream& out) {
  out << "round,channel,src,dst,kind,bytes\n";
  for (const auto& m : ledger.events())
    out << m.round << ',' << to_string(m.channel()) << ',' << detail::endpoint_name(m.src) << ','
        << detail::endpoint_name(m.dst) << ',' << to_string(m.kind) << ',' << m.bytes() << '\n';
}

inline std::vector<Message> read_event_log(std::istream& in) {
  std::vector<Message> out;
  std::string line;
  if (!std::getline(in, line) || line != "round,channel,src,dst,kind,bytes")
    throw DataError("event log must start with the header round,channel,src,dst,kind,bytes");
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    try {
      if (f.size() != 6) throw DataError("expected 6 fields");
      Message m;
      m.round = static_cast<std::uint32_t>(std::stoul(f[0]));
      m.src = detail::parse_endpoint(f[2]);
      m.dst = detail::parse_endpoint(f[3]);
      m.kind = kind_from_string(f[4]);
      const auto bytes = std::stoull(f[5]);
      if (bytes < kHeaderBytes || (bytes - kHeaderBytes) % kBytesPerFloat != 0) throw DataError("bad byte count");
      m.float_count = (bytes - kHeaderBytes) / kBytesPerFloat;
      if (to_string(m.channel()) != f[1]) throw DataError("channel does not match endpoints");
      out.push_back(m);
    } catch (const std::exception& e) {
      throw DataError("event log line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Rebuilds a ledger from logged messages.
inline CommLedger replay(std::span<const Message> events, std::size_t num_clients,
                         Attribution attribution = Attribution::sender) {
  CommLedger ledger(num_clients, attribution, true);
  for (const auto& m : events) ledger.record(m);
  return ledger;
}

}  // namespace retexo::net
