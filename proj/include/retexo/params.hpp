#pragma once

// Model parameters: an ordered list of layer descriptors plus the tensors they
// own. The same container serves MLPs, Retexo blocks and end-to-end GNNs, and
// is templated on the scalar so a 64-bit shadow copy can back gradient checks.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace retexo::nn {

enum class Arch { mlp, gcn, sage, gat, retexo_block };

/// Neighborhood aggregation used by a GNN or by a Retexo block.
enum class Aggregator { mean, max_pool, attention };

enum class LayerKind {
  dense,        // y = x W + b
  mean_concat,  // y = [x_v ; mean_u x_u] W + b
  max_pool,     // y = [x_v ; max_u relu(x_u Wp + bp)] W + b
  attention,    // y_k = sum_u softmax_u(leaky(a_self_k z_v + a_neigh_k z_u)) z_u,  z = x W
};

inline constexpr double kLeakySlope = 0.2;

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0, out = 0;
  bool bias = true;
  bool relu = false;
  bool residual = false;  // output += own input (in == out)
  std::size_t heads = 1;
  std::size_t pool = 0;
  std::size_t first_tensor = 0;

  bool is_graph() const { return kind != LayerKind::dense; }
  bool operator==(const LayerSpec&) const = default;
};

struct ModelDims {
  std::size_t input = 0, hidden = 0, output = 0;
  bool operator==(const ModelDims&) const = default;
};

template <class Real>
struct Tensor {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<Real> data;

  Tensor() = default;
  Tensor(std::string n, std::size_t r, std::size_t c) : name(std::move(n)), rows(r), cols(c), data(r * c, Real(0)) {}

  std::size_t size() const { return data.size(); }
  Real* row(std::size_t r) { return data.data() + r * cols; }
  const Real* row(std::size_t r) const { return data.data() + r * cols; }
  bool operator==(const Tensor&) const = default;
};

template <class Real>
struct BasicParams {
  Arch arch = Arch::mlp;
  Aggregator aggregator = Aggregator::mean;
  ModelDims dims;
  std::size_t heads = 1;
  std::size_t pool_dim = 0;
  bool residual = false;
  std::vector<LayerSpec> layers;
  std::vector<Tensor<Real>> tensors;

  std::size_t num_floats() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  std::size_t layer_floats(std::size_t layer) const {
    const auto first = layers[layer].first_tensor;
    const auto last = layer + 1 < layers.size() ? layers[layer + 1].first_tensor : tensors.size();
    std::size_t n = 0;
    for (auto i = first; i < last; ++i) n += tensors[i].size();
    return n;
  }

  std::size_t num_graph_layers() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.is_graph();
    return n;
  }

  bool same_shape(const BasicParams& o) const {
    if (layers != o.layers || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].rows != o.tensors[i].rows || tensors[i].cols != o.tensors[i].cols) return false;
    return true;
  }

  BasicParams zeros_like() const {
    BasicParams z = *this;
    for (auto& t : z.tensors) std::fill(t.data.begin(), t.data.end(), Real(0));
    return z;
  }

  template <class To>
  BasicParams<To> cast() const {
    BasicParams<To> out;
    out.arch = arch;
    out.aggregator = aggregator;
    out.dims = dims;
    out.heads = heads;
    out.pool_dim = pool_dim;
    out.residual = residual;
    out.layers = layers;
    for (const auto& t : tensors) {
      Tensor<To> c(t.name, t.rows, t.cols);
      for (std::size_t i = 0; i < t.size(); ++i) c.data[i] = static_cast<To>(t.data[i]);
      out.tensors.push_back(std::move(c));
    }
    return out;
  }

  template <class F>
  void for_each_value(F&& f) {
    for (auto& t : tensors)
      for (auto& x : t.data) f(x);
  }

  bool operator==(const BasicParams&) const = default;
};

using ModelParams = BasicParams<float>;

// ---------------------------------------------------------------------------
// Names

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::mlp: return "mlp";
    case Arch::gcn: return "gcn";
    case Arch::sage: return "sage";
    case Arch::gat: return "gat";
    case Arch::retexo_block: return "retexo-block";
  }
  return "?";
}

inline Arch arch_from_string(std::string_view s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "gcn") return Arch::gcn;
  if (s == "sage") return Arch::sage;
  if (s == "gat") return Arch::gat;
  if (s == "retexo-block") return Arch::retexo_block;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

inline std::string_view to_string(Aggregator a) {
  switch (a) {
    case Aggregator::mean: return "mean";
    case Aggregator::max_pool: return "max-pool";
    case Aggregator::attention: return "attention";
  }
  return "?";
}

inline Aggregator aggregator_from_string(std::string_view s) {
  if (s == "mean") return Aggregator::mean;
  if (s == "max-pool") return Aggregator::max_pool;
  if (s == "attention") return Aggregator::attention;
  throw ConfigError("unknown aggregator '" + std::string(s) + "'");
}

/// The aggregator each base GNN uses.
inline Aggregator aggregator_of(Arch a) {
  switch (a) {
    case Arch::gcn: return Aggregator::mean;
    case Arch::sage: return Aggregator::max_pool;
    case Arch::gat: return Aggregator::attention;
    default: throw ConfigError("architecture '" + std::string(to_string(a)) + "' has no aggregator");
  }
}

inline Arch arch_of(Aggregator a) {
  switch (a) {
    case Aggregator::mean: return Arch::gcn;
    case Aggregator::max_pool: return Arch::sage;
    case Aggregator::attention: return Arch::gat;
  }
  return Arch::gcn;
}

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::mean_concat: return "mean-concat";
    case LayerKind::max_pool: return "max-pool";
    case LayerKind::attention: return "attention";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  if (s == "dense") return LayerKind::dense;
  if (s == "mean-concat") return LayerKind::mean_concat;
  if (s == "max-pool") return LayerKind::max_pool;
  if (s == "attention") return LayerKind::attention;
  throw DataError("unknown layer kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <class Real>
void append_layer(BasicParams<Real>& p, LayerSpec spec) {
  spec.first_tensor = p.tensors.size();
  const auto id = std::to_string(p.layers.size());
  switch (spec.kind) {
    case LayerKind::dense:
      p.tensors.emplace_back("l" + id + ".weight", spec.in, spec.out);
      break;
    case LayerKind::mean_concat:
      p.tensors.emplace_back("l" + id + ".weight", 2 * spec.in, spec.out);
      break;
    case LayerKind::max_pool:
      p.tensors.emplace_back("l" + id + ".pool_weight", spec.in, spec.pool);
      p.tensors.emplace_back("l" + id + ".pool_bias", 1, spec.pool);
      p.tensors.emplace_back("l" + id + ".weight", spec.in + spec.pool, spec.out);
      break;
    case LayerKind::attention:
      if (spec.heads == 0 || spec.out % spec.heads != 0)
        throw ShapeError("attention width " + std::to_string(spec.out) + " is not divisible by " +
                         std::to_string(spec.heads) + " heads");
      p.tensors.emplace_back("l" + id + ".weight", spec.in, spec.out);
      p.tensors.emplace_back("l" + id + ".att_self", spec.heads, spec.out / spec.heads);
      p.tensors.emplace_back("l" + id + ".att_neigh", spec.heads, spec.out / spec.heads);
      break;
  }
  if (spec.bias) p.tensors.emplace_back("l" + id + ".bias", 1, spec.out);
  p.layers.push_back(spec);
}

inline LayerKind graph_kind(Aggregator a) {
  switch (a) {
    case Aggregator::mean: return LayerKind::mean_concat;
    case Aggregator::max_pool: return LayerKind::max_pool;
    case Aggregator::attention: return LayerKind::attention;
  }
  return LayerKind::mean_concat;
}

}  // namespace detail

/// Glorot-uniform weights, zero biases; keyed on (seed, tensor index).
template <class Real>
void initialize(BasicParams<Real>& p, std::uint64_t seed) {
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& t = p.tensors[i];
    if (t.name.ends_with("bias")) {
      std::fill(t.data.begin(), t.data.end(), Real(0));
      continue;
    }
    const bool attention_vec = t.name.ends_with("att_self") || t.name.ends_with("att_neigh");
    const double fan = attention_vec ? static_cast<double>(2 * t.cols + 1)
                                     : static_cast<double>(t.rows + t.cols);
    const double limit = std::sqrt(6.0 / fan);
    CounterRng rng(derive_key(seed, {stream::init, i}));
    for (auto& x : t.data) x = static_cast<Real>((2.0 * rng.uniform() - 1.0) * limit);
  }
}

/// Two dense layers with a ReLU between them: (in -> hidden -> out).
inline ModelParams make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
  ModelParams p;
  p.arch = Arch::mlp;
  p.dims = {in, hidden, out};
  detail::append_layer(p, {.kind = LayerKind::dense, .in = in, .out = hidden, .bias = true, .relu = true});
  detail::append_layer(p, {.kind = LayerKind::dense, .in = hidden, .out = out, .bias = true, .relu = false});
  initialize(p, seed);
  return p;
}

struct GraphModelOptions {
  std::size_t heads = 8;
  std::size_t pool_dim = 512;
  bool residual = false;
};

/// One Retexo model after the first: the base GNN's aggregation over
/// embeddings of width `in`, then a dense layer (in -> hidden -> out). Retexo
/// itself always uses in == out.
inline ModelParams make_retexo_block(Aggregator agg, std::size_t in, std::size_t hidden, std::size_t out,
                                     const GraphModelOptions& opt, std::uint64_t seed) {
  ModelParams p;
  p.arch = Arch::retexo_block;
  p.aggregator = agg;
  p.dims = {in, hidden, out};
  p.heads = agg == Aggregator::attention ? opt.heads : 1;
  p.pool_dim = agg == Aggregator::max_pool ? opt.pool_dim : 0;
  p.residual = opt.residual;
  detail::append_layer(p, {.kind = detail::graph_kind(agg), .in = in, .out = hidden, .bias = true,
                           .relu = true, .heads = p.heads, .pool = p.pool_dim});
  detail::append_layer(p, {.kind = LayerKind::dense, .in = hidden, .out = out, .bias = true});
  initialize(p, seed);
  return p;
}

/// End-to-end K-layer message-passing GNN (input -> hidden ... -> output).
/// Graph layers carry no bias. The last attention layer uses a single head.
inline ModelParams make_gnn(Arch arch, std::size_t num_layers, std::size_t in, std::size_t hidden,
                            std::size_t out, const GraphModelOptions& opt, std::uint64_t seed) {
  if (num_layers == 0) throw ConfigError("a GNN needs at least one layer");
  ModelParams p;
  p.arch = arch;
  p.aggregator = aggregator_of(arch);
  p.dims = {in, hidden, out};
  p.heads = arch == Arch::gat ? opt.heads : 1;
  p.pool_dim = arch == Arch::sage ? opt.pool_dim : 0;
  p.residual = opt.residual;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const bool last = l + 1 == num_layers;
    detail::append_layer(p, {.kind = detail::graph_kind(p.aggregator),
                             .in = l == 0 ? in : hidden,
                             .out = last ? out : hidden,
                             .bias = false,
                             .relu = !last,
                             .residual = opt.residual && l > 0 && !last,
                             .heads = last ? 1 : p.heads,
                             .pool = p.pool_dim});
  }
  initialize(p, seed);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: u32 little-endian header length, JSON header, then every
// tensor's values as little-endian 32-bit floats in declaration order.

inline nlohmann::json checkpoint_header(const ModelParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers)
    layers.push_back({{"kind", to_string(l.kind)}, {"in", l.in}, {"out", l.out}, {"bias", l.bias},
                      {"relu", l.relu}, {"residual", l.residual}, {"heads", l.heads}, {"pool", l.pool}});
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& t : p.tensors) shapes.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  return {{"arch", to_string(p.arch)},
          {"aggregator", to_string(p.aggregator)},
          {"dims", {p.dims.input, p.dims.hidden, p.dims.output}},
          {"heads", p.heads},
          {"pool_dim", p.pool_dim},
          {"residual", p.residual},
          {"layers", layers},
          {"tensors", shapes}};
}

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4] = {};
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("truncated checkpoint");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}
}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + file.string());
  const auto header = checkpoint_header(p).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : p.tensors)
    for (float x : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(x));
}

inline ModelParams load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + file.string());
  const auto len = detail::get_u32(in);
  std::string header(len, '\0');
  in.read(header.data(), len);
  if (!in) throw DataError("truncated checkpoint header");
  ModelParams p;
  try {
    auto h = nlohmann::json::parse(header);
    p.arch = arch_from_string(h.at("arch").get<std::string>());
    p.aggregator = aggregator_from_string(h.at("aggregator").get<std::string>());
    auto d = h.at("dims");
    p.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    p.heads = h.at("heads").get<std::size_t>();
    p.pool_dim = h.at("pool_dim").get<std::size_t>();
    p.residual = h.at("residual").get<bool>();
    for (const auto& l : h.at("layers")) {
      LayerSpec s{.kind = layer_kind_from_string(l.at("kind").get<std::string>()),
                  .in = l.at("in").get<std::size_t>(),
                  .out = l.at("out").get<std::size_t>(),
                  .bias = l.at("bias").get<bool>(),
                  .relu = l.at("relu").get<bool>(),
                  .residual = l.at("residual").get<bool>(),
                  .heads = l.at("heads").get<std::size_t>(),
                  .pool = l.at("pool").get<std::size_t>()};
      detail::append_layer(p, s);
    }
    const auto& shapes = h.at("tensors");
    if (shapes.size() != p.tensors.size()) throw DataError("checkpoint tensor list does not match its layers");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      auto& t = p.tensors[i];
      if (shapes[i].at("shape").at(0).get<std::size_t>() != t.rows ||
          shapes[i].at("shape").at(1).get<std::size_t>() != t.cols)
        throw DataError("checkpoint tensor " + t.name + " has an unexpected shape");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  for (auto& t : p.tensors)
    for (auto& x : t.data) x = std::bit_cast<float>(detail::get_u32(in));
  return p;
}

}  // namespace retexo::nn
