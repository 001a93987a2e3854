#pragma once

// Central finite differences on a 64-bit copy of a model, compared against
// the analytic backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "kernels.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace retexo::nn {

struct GradCheckOptions {
  double epsilon = 1e-4;
  /// Denominator floor of the relative error, so entries whose true gradient
  /// is ~0 are judged on absolute error instead of amplifying round-off.
  double floor = 1e-6;
  std::size_t heads = 2;
  std::size_t pool_dim = 8;
};

struct GradCheckReport {
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // entries whose +/- epsilon probes crossed a ReLU/max/LeakyReLU kink
};

namespace detail {

/// Six source rows, three targets with 3, 2 and 0 neighbors.
inline Topology gradcheck_topology() {
  Topology t;
  t.num_sources = 6;
  const std::uint32_t a[] = {1, 2, 3}, b[] = {0, 5};
  t.add_target(0, a);
  t.add_target(4, b);
  t.add_target(5, {});
  return t;
}

}  // namespace detail

/// Worst relative error between analytic and numeric gradients over every
/// parameter of the model, on a random small batch.
inline GradCheckReport grad_check_model(const BasicParams<double>& p, std::uint64_t seed,
                                 const GradCheckOptions& opt = {}) {
  const bool graph = p.num_graph_layers() > 0;
  std::vector<Topology> topo;
  std::size_t rows = 3;
  if (graph) {
    topo.push_back(detail::gradcheck_topology());
    rows = topo.front().num_sources;
    for (std::size_t l = 1; l < p.num_graph_layers(); ++l) {
      Topology t;
      t.num_sources = topo.back().num_targets();
      const std::uint32_t a[] = {1, 2}, b[] = {0};
      t.add_target(0, a);
      t.add_target(1, b);
      t.add_target(2, {});
      topo.push_back(std::move(t));
    }
  }
  CounterRng rng(derive_key(seed, {stream::synth, 0x67636bULL}));
  Rows<double> x(rows, p.layers.front().in);
  for (auto& v : x.data()) v = rng.normal();
  std::vector<std::int32_t> labels(graph ? topo.back().num_targets() : rows);
  for (auto& y : labels) y = static_cast<std::int32_t>(rng.below(p.layers.back().out));

  auto loss_of = [&](const BasicParams<double>& q, std::vector<std::int64_t>* pattern) {
    auto tape = forward(q, x, topo);
    if (pattern) *pattern = activation_pattern(q, tape);
    return softmax_cross_entropy(tape.output, labels).loss;
  };

  auto tape = forward(p, x, topo);
  const auto base_pattern = activation_pattern(p, tape);
  auto loss = softmax_cross_entropy(tape.output, labels);
  auto grads = p.zeros_like();
  backward(p, tape, topo, std::move(loss.d_logits), grads);

  GradCheckReport report;
  BasicParams<double> probe = p;
  std::vector<std::int64_t> up_pattern, down_pattern;
  for (std::size_t t = 0; t < p.tensors.size(); ++t) {
    for (std::size_t i = 0; i < p.tensors[t].size(); ++i) {
      const double orig = p.tensors[t].data[i];
      probe.tensors[t].data[i] = orig + opt.epsilon;
      const double up = loss_of(probe, &up_pattern);
      probe.tensors[t].data[i] = orig - opt.epsilon;
      const double down = loss_of(probe, &down_pattern);
      probe.tensors[t].data[i] = orig;
      if (up_pattern != base_pattern || down_pattern != base_pattern) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (up - down) / (2 * opt.epsilon);
      const double analytic = grads.tensors[t].data[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.floor});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(numeric - analytic) / denom);
      ++report.checked;
    }
  }
  return report;
}

/// Builds the named architecture at `dims` and checks it. Graph
/// architectures are checked as Retexo blocks: aggregation layer followed by a
/// dense layer.
inline GradCheckReport grad_check(Arch arch, ModelDims dims, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  ModelParams p;
  if (arch == Arch::mlp) {
    p = make_mlp(dims.input, dims.hidden, dims.output, seed);
  } else {
    const auto agg = arch == Arch::retexo_block ? Aggregator::mean : aggregator_of(arch);
    p = make_retexo_block(agg, dims.input, dims.hidden, dims.output,
                          {.heads = opt.heads, .pool_dim = opt.pool_dim, .residual = false}, seed);
  }
  return grad_check_model(p.cast<double>(), seed, opt);
}

}  // namespace retexo::nn
