#pragma once

// Forward and backward passes for dense and message-passing layers.
//
// A batch is a set of source rows (node representations) and, for each graph
// layer, a Topology mapping targets to their own source row and their
// neighbors' source rows. Dense layers map rows one-to-one. Every kernel
// walks targets, neighbors and sources in index order, so results are a pure
// function of the inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "params.hpp"

namespace retexo::nn {

template <class Real>
class Rows {
 public:
  Rows() = default;
  Rows(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, Real(0)) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  Real* row(std::size_t r) { return data_.data() + r * cols_; }
  const Real* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<const Real> view(std::size_t r) const { return {row(r), cols_}; }
  std::vector<Real>& data() { return data_; }
  const std::vector<Real>& data() const { return data_; }

  template <class To>
  Rows<To> cast() const {
    Rows<To> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<To>(data_[i]);
    return out;
  }

  bool operator==(const Rows&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<Real> data_;
};

/// Target -> (own source row, neighbor source rows), CSR layout.
struct Topology {
  std::size_t num_sources = 0;
  std::vector<std::uint32_t> own;
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> neighbors;

  std::size_t num_targets() const { return own.size(); }
  std::span<const std::uint32_t> neighbors_of(std::size_t t) const {
    return {neighbors.data() + offsets[t], offsets[t + 1] - offsets[t]};
  }
  void add_target(std::uint32_t own_row, std::span<const std::uint32_t> nbrs) {
    own.push_back(own_row);
    neighbors.insert(neighbors.end(), nbrs.begin(), nbrs.end());
    offsets.push_back(static_cast<std::uint32_t>(neighbors.size()));
  }
};

/// Per-layer values kept from the forward pass for the backward pass.
template <class Real>
struct LayerCache {
  Rows<Real> input;     // rows the layer consumed
  Rows<Real> combined;  // mean_concat / max_pool: the [own ; aggregate] rows fed to the weight
  Rows<Real> pre;       // pre-activation output
  Rows<Real> pool_pre;  // max_pool: pre-ReLU pool values of every source row used as a neighbor
  std::vector<std::int32_t> argmax;  // max_pool: winning source row per (target, pool unit), -1 if none
  std::vector<std::uint8_t> pooled;  // max_pool: source rows whose pool values were computed
  Rows<Real> projected;              // attention: x W per source row
  std::vector<Real> score;           // attention: raw score per (target, candidate, head)
  std::vector<Real> alpha;           // attention: softmax weight per (target, candidate, head)
};

template <class Real>
struct Tape {
  std::vector<LayerCache<Real>> layers;
  Rows<Real> output;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// y = x W (+ b); zero inputs are skipped, which makes sparse features cheap.
template <class Real>
Rows<Real> affine(const Rows<Real>& x, std::size_t x_offset, std::size_t x_width, const Tensor<Real>& w,
                  const Tensor<Real>* b) {
  Rows<Real> y(x.rows(), w.cols);
  const auto out = w.cols;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Real* yr = y.row(r);
    if (b) std::copy(b->data.begin(), b->data.end(), yr);
    const Real* xr = x.row(r) + x_offset;
    for (std::size_t i = 0; i < x_width; ++i) {
      const Real xi = xr[i];
      if (xi == Real(0)) continue;
      const Real* wi = w.row(i);
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
  return y;
}

/// dW += x^T dy; db += column sums of dy.
template <class Real>
void affine_param_grads(const Rows<Real>& x, const Rows<Real>& dy, Tensor<Real>& dw, Tensor<Real>* db) {
  const auto out = dy.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const Real* dyr = dy.row(r);
    if (db)
      for (std::size_t o = 0; o < out; ++o) db->data[o] += dyr[o];
    const Real* xr = x.row(r);
    for (std::size_t i = 0; i < x.cols(); ++i) {
      const Real xi = xr[i];
      if (xi == Real(0)) continue;
      Real* dwi = dw.row(i);
      for (std::size_t o = 0; o < out; ++o) dwi[o] += xi * dyr[o];
    }
  }
}

/// dx[r][i] = sum_o W[first_row + i][o] dy[r][o] for i < width.
template <class Real>
Rows<Real> input_grads(const Rows<Real>& dy, const Tensor<Real>& w, std::size_t first_row, std::size_t width) {
  const auto out = dy.cols();
  std::vector<Real> wt(out * width);  // W slice transposed, so the inner loop runs over contiguous memory
  for (std::size_t i = 0; i < width; ++i) {
    const Real* wi = w.row(first_row + i);
    for (std::size_t o = 0; o < out; ++o) wt[o * width + i] = wi[o];
  }
  Rows<Real> dx(dy.rows(), width);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    const Real* dyr = dy.row(r);
    Real* dxr = dx.row(r);
    for (std::size_t o = 0; o < out; ++o) {
      const Real d = dyr[o];
      if (d == Real(0)) continue;
      const Real* wo = wt.data() + o * width;
      for (std::size_t i = 0; i < width; ++i) dxr[i] += d * wo[i];
    }
  }
  return dx;
}

template <class Real>
Real leaky(Real s) {
  return s > Real(0) ? s : static_cast<Real>(kLeakySlope) * s;
}

template <class Real>
void check_topology(const Topology& topo, std::size_t sources) {
  require(topo.num_sources == sources, "topology expects " + std::to_string(topo.num_sources) +
                                           " source rows, got " + std::to_string(sources));
  require(topo.offsets.size() == topo.own.size() + 1, "topology offsets do not match its targets");
}

// --- dense ----------------------------------------------------------------

template <class Real>
Rows<Real> dense_forward(const BasicParams<Real>& p, const LayerSpec& s, LayerCache<Real>& c) {
  const auto& w = p.tensors[s.first_tensor];
  const auto* b = s.bias ? &p.tensors[s.first_tensor + 1] : nullptr;
  return affine(c.input, 0, s.in, w, b);
}

template <class Real>
void dense_backward(const BasicParams<Real>& p, const LayerSpec& s, const LayerCache<Real>& c,
                    const Rows<Real>& dz, BasicParams<Real>& g, Rows<Real>* dx) {
  auto* db = s.bias ? &g.tensors[s.first_tensor + 1] : nullptr;
  affine_param_grads(c.input, dz, g.tensors[s.first_tensor], db);
  if (dx) *dx = input_grads(dz, p.tensors[s.first_tensor], 0, s.in);
}

// --- mean_concat ------------------------------------------------------------

template <class Real>
Rows<Real> mean_concat_forward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                               LayerCache<Real>& c) {
  const auto in = s.in;
  c.combined = Rows<Real>(topo.num_targets(), 2 * in);
  for (std::size_t t = 0; t < topo.num_targets(); ++t) {
    Real* ct = c.combined.row(t);
    std::copy_n(c.input.row(topo.own[t]), in, ct);
    const auto nb = topo.neighbors_of(t);
    if (nb.empty()) continue;
    Real* mean = ct + in;
    for (auto u : nb) {
      const Real* xu = c.input.row(u);
      for (std::size_t i = 0; i < in; ++i) mean[i] += xu[i];
    }
    const auto deg = static_cast<Real>(nb.size());
    for (std::size_t i = 0; i < in; ++i) mean[i] /= deg;
  }
  const auto* b = s.bias ? &p.tensors[s.first_tensor + 1] : nullptr;
  return affine(c.combined, 0, 2 * in, p.tensors[s.first_tensor], b);
}

template <class Real>
void mean_concat_backward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                          const LayerCache<Real>& c, const Rows<Real>& dz, BasicParams<Real>& g,
                          Rows<Real>* dx) {
  auto* db = s.bias ? &g.tensors[s.first_tensor + 1] : nullptr;
  affine_param_grads(c.combined, dz, g.tensors[s.first_tensor], db);
  if (!dx) return;
  const auto in = s.in;
  const auto dc = input_grads(dz, p.tensors[s.first_tensor], 0, 2 * in);
  *dx = Rows<Real>(c.input.rows(), in);
  for (std::size_t t = 0; t < topo.num_targets(); ++t) {
    const Real* dct = dc.row(t);
    Real* own = dx->row(topo.own[t]);
    for (std::size_t i = 0; i < in; ++i) own[i] += dct[i];
    const auto nb = topo.neighbors_of(t);
    if (nb.empty()) continue;
    const auto deg = static_cast<Real>(nb.size());
    for (auto u : nb) {
      Real* du = dx->row(u);
      for (std::size_t i = 0; i < in; ++i) du[i] += dct[in + i] / deg;
    }
  }
}

// --- max_pool -----------------------------------------------------------------

template <class Real>
Rows<Real> max_pool_forward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                            LayerCache<Real>& c) {
  const auto in = s.in, pool = s.pool;
  const auto& wp = p.tensors[s.first_tensor];
  const auto& bp = p.tensors[s.first_tensor + 1];
  const auto sources = c.input.rows();

  c.pooled.assign(sources, 0);
  for (auto u : topo.neighbors) c.pooled[u] = 1;
  c.pool_pre = Rows<Real>(sources, pool);
  for (std::size_t r = 0; r < sources; ++r) {
    if (!c.pooled[r]) continue;
    Real* pr = c.pool_pre.row(r);
    std::copy(bp.data.begin(), bp.data.end(), pr);
    const Real* xr = c.input.row(r);
    for (std::size_t i = 0; i < in; ++i) {
      const Real xi = xr[i];
      if (xi == Real(0)) continue;
      const Real* wi = wp.row(i);
      for (std::size_t j = 0; j < pool; ++j) pr[j] += xi * wi[j];
    }
  }

  const auto targets = topo.num_targets();
  c.combined = Rows<Real>(targets, in + pool);
  c.argmax.assign(targets * pool, -1);
  for (std::size_t t = 0; t < targets; ++t) {
    Real* ct = c.combined.row(t);
    std::copy_n(c.input.row(topo.own[t]), in, ct);
    Real* agg = ct + in;
    std::int32_t* arg = c.argmax.data() + t * pool;
    for (auto u : topo.neighbors_of(t)) {
      const Real* pu = c.pool_pre.row(u);
      for (std::size_t j = 0; j < pool; ++j)
        if (pu[j] > agg[j]) {  // agg starts at 0, so this is max over ReLU(pool)
          agg[j] = pu[j];
          arg[j] = static_cast<std::int32_t>(u);
        }
    }
  }
  const auto* b = s.bias ? &p.tensors[s.first_tensor + 3] : nullptr;
  return affine(c.combined, 0, in + pool, p.tensors[s.first_tensor + 2], b);
}

template <class Real>
void max_pool_backward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                       const LayerCache<Real>& c, const Rows<Real>& dz, BasicParams<Real>& g,
                       Rows<Real>* dx) {
  const auto in = s.in, pool = s.pool;
  const auto& w = p.tensors[s.first_tensor + 2];
  auto* db = s.bias ? &g.tensors[s.first_tensor + 3] : nullptr;
  affine_param_grads(c.combined, dz, g.tensors[s.first_tensor + 2], db);

  const auto dagg = input_grads(dz, w, in, pool);
  const auto sources = c.input.rows();
  Rows<Real> dpool(sources, pool);
  for (std::size_t t = 0; t < topo.num_targets(); ++t) {
    const Real* dt = dagg.row(t);
    const std::int32_t* arg = c.argmax.data() + t * pool;
    for (std::size_t j = 0; j < pool; ++j)
      if (arg[j] >= 0) dpool.row(static_cast<std::size_t>(arg[j]))[j] += dt[j];
  }

  auto& dwp = g.tensors[s.first_tensor];
  auto& dbp = g.tensors[s.first_tensor + 1];
  for (std::size_t r = 0; r < sources; ++r) {
    if (!c.pooled[r]) continue;
    const Real* dr = dpool.row(r);
    for (std::size_t j = 0; j < pool; ++j) dbp.data[j] += dr[j];
    const Real* xr = c.input.row(r);
    for (std::size_t i = 0; i < in; ++i) {
      const Real xi = xr[i];
      if (xi == Real(0)) continue;
      Real* gi = dwp.row(i);
      for (std::size_t j = 0; j < pool; ++j) gi[j] += xi * dr[j];
    }
  }
  if (!dx) return;

  const auto down = input_grads(dz, w, 0, in);
  const auto through_pool = input_grads(dpool, p.tensors[s.first_tensor], 0, in);
  *dx = Rows<Real>(sources, in);
  for (std::size_t t = 0; t < topo.num_targets(); ++t) {
    Real* own = dx->row(topo.own[t]);
    const Real* dt = down.row(t);
    for (std::size_t i = 0; i < in; ++i) own[i] += dt[i];
  }
  for (std::size_t r = 0; r < sources; ++r) {
    if (!c.pooled[r]) continue;
    Real* dr = dx->row(r);
    const Real* tp = through_pool.row(r);
    for (std::size_t i = 0; i < in; ++i) dr[i] += tp[i];
  }
}

// --- attention --------------------------------------------------------------
// Candidates of target t are its own row followed by its neighbors; their
// per-head values live at ((offsets[t] + t) + k) * heads + h.

inline std::size_t candidate_base(const Topology& topo, std::size_t t) { return topo.offsets[t] + t; }

template <class Real>
Rows<Real> attention_forward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                             LayerCache<Real>& c) {
  const auto heads = s.heads, width = s.out / s.heads;
  const auto& w = p.tensors[s.first_tensor];
  const auto& a_self = p.tensors[s.first_tensor + 1];
  const auto& a_neigh = p.tensors[s.first_tensor + 2];

  c.projected = affine(c.input, 0, s.in, w, static_cast<const Tensor<Real>*>(nullptr));

  const auto targets = topo.num_targets();
  const auto total = topo.neighbors.size() + targets;
  c.score.assign(total * heads, Real(0));
  c.alpha.assign(total * heads, Real(0));
  Rows<Real> z(targets, s.out);
  if (s.bias)
    for (std::size_t t = 0; t < targets; ++t) std::copy_n(p.tensors[s.first_tensor + 3].data.data(), s.out, z.row(t));

  std::vector<std::uint32_t> cand;
  for (std::size_t t = 0; t < targets; ++t) {
    cand.assign(1, topo.own[t]);
    const auto nb = topo.neighbors_of(t);
    cand.insert(cand.end(), nb.begin(), nb.end());
    const auto base = candidate_base(topo, t);
    for (std::size_t h = 0; h < heads; ++h) {
      const Real* as = a_self.row(h);
      const Real* an = a_neigh.row(h);
      const Real* zv = c.projected.row(topo.own[t]) + h * width;
      Real self_part = 0;
      for (std::size_t f = 0; f < width; ++f) self_part += as[f] * zv[f];
      Real best = -std::numeric_limits<Real>::infinity();
      for (std::size_t k = 0; k < cand.size(); ++k) {
        const Real* zu = c.projected.row(cand[k]) + h * width;
        Real sc = self_part;
        for (std::size_t f = 0; f < width; ++f) sc += an[f] * zu[f];
        c.score[(base + k) * heads + h] = sc;
        best = std::max(best, leaky(sc));
      }
      Real denom = 0;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        const Real e = std::exp(leaky(c.score[(base + k) * heads + h]) - best);
        c.alpha[(base + k) * heads + h] = e;
        denom += e;
      }
      Real* zt = z.row(t) + h * width;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        Real& al = c.alpha[(base + k) * heads + h];
        al /= denom;
        const Real* zu = c.projected.row(cand[k]) + h * width;
        for (std::size_t f = 0; f < width; ++f) zt[f] += al * zu[f];
      }
    }
  }
  return z;
}

template <class Real>
void attention_backward(const BasicParams<Real>& p, const LayerSpec& s, const Topology& topo,
                        const LayerCache<Real>& c, const Rows<Real>& dz, BasicParams<Real>& g,
                        Rows<Real>* dx) {
  const auto heads = s.heads, width = s.out / s.heads;
  const auto& a_self = p.tensors[s.first_tensor + 1];
  const auto& a_neigh = p.tensors[s.first_tensor + 2];
  auto& da_self = g.tensors[s.first_tensor + 1];
  auto& da_neigh = g.tensors[s.first_tensor + 2];
  if (s.bias) {
    auto& db = g.tensors[s.first_tensor + 3];
    for (std::size_t t = 0; t < dz.rows(); ++t)
      for (std::size_t o = 0; o < s.out; ++o) db.data[o] += dz.row(t)[o];
  }

  Rows<Real> dproj(c.input.rows(), s.out);
  std::vector<std::uint32_t> cand;
  std::vector<Real> dscore;
  const auto slope = static_cast<Real>(kLeakySlope);
  for (std::size_t t = 0; t < topo.num_targets(); ++t) {
    cand.assign(1, topo.own[t]);
    const auto nb = topo.neighbors_of(t);
    cand.insert(cand.end(), nb.begin(), nb.end());
    const auto base = candidate_base(topo, t);
    dscore.assign(cand.size(), Real(0));
    for (std::size_t h = 0; h < heads; ++h) {
      const Real* dzt = dz.row(t) + h * width;
      // d alpha, and the direct path into the projected values
      Real weighted = 0;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        const Real al = c.alpha[(base + k) * heads + h];
        const Real* zu = c.projected.row(cand[k]) + h * width;
        Real* du = dproj.row(cand[k]) + h * width;
        Real dal = 0;
        for (std::size_t f = 0; f < width; ++f) {
          dal += dzt[f] * zu[f];
          du[f] += al * dzt[f];
        }
        dscore[k] = dal;
        weighted += al * dal;
      }
      // softmax and LeakyReLU
      Real self_total = 0;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        const Real al = c.alpha[(base + k) * heads + h];
        const Real sc = c.score[(base + k) * heads + h];
        const Real ds = al * (dscore[k] - weighted) * (sc > Real(0) ? Real(1) : slope);
        self_total += ds;
        const Real* zu = c.projected.row(cand[k]) + h * width;
        Real* du = dproj.row(cand[k]) + h * width;
        Real* gan = da_neigh.row(h);
        const Real* an = a_neigh.row(h);
        for (std::size_t f = 0; f < width; ++f) {
          gan[f] += ds * zu[f];
          du[f] += ds * an[f];
        }
      }
      const Real* zv = c.projected.row(topo.own[t]) + h * width;
      Real* dv = dproj.row(topo.own[t]) + h * width;
      Real* gas = da_self.row(h);
      const Real* as = a_self.row(h);
      for (std::size_t f = 0; f < width; ++f) {
        gas[f] += self_total * zv[f];
        dv[f] += self_total * as[f];
      }
    }
  }
  affine_param_grads(c.input, dproj, g.tensors[s.first_tensor], static_cast<Tensor<Real>*>(nullptr));
  if (dx) *dx = input_grads(dproj, p.tensors[s.first_tensor], 0, s.in);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Whole-model passes

/// Runs every layer. Graph layers consume `topologies` in order; the first
/// graph layer reads `input` as its source rows and each later one reads the
/// previous layer's targets. Retexo blocks flagged residual add their own
/// input row to the output.
template <class Real>
Tape<Real> forward(const BasicParams<Real>& p, Rows<Real> input, std::span<const Topology> topologies) {
  Tape<Real> tape;
  tape.layers.resize(p.layers.size());
  std::size_t next_topology = 0;
  const Topology* first_topology = nullptr;
  Rows<Real> x = std::move(input);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& s = p.layers[l];
    auto& c = tape.layers[l];
    detail::require(x.cols() == s.in, "layer " + std::to_string(l) + " expects width " + std::to_string(s.in) +
                                          ", got " + std::to_string(x.cols()));
    c.input = std::move(x);
    const Topology* topo = nullptr;
    if (s.is_graph()) {
      detail::require(next_topology < topologies.size(), "missing topology for graph layer " + std::to_string(l));
      topo = &topologies[next_topology++];
      detail::check_topology<Real>(*topo, c.input.rows());
      if (!first_topology) first_topology = topo;
    }
    switch (s.kind) {
      case LayerKind::dense: c.pre = detail::dense_forward(p, s, c); break;
      case LayerKind::mean_concat: c.pre = detail::mean_concat_forward(p, s, *topo, c); break;
      case LayerKind::max_pool: c.pre = detail::max_pool_forward(p, s, *topo, c); break;
      case LayerKind::attention: c.pre = detail::attention_forward(p, s, *topo, c); break;
    }
    x = c.pre;
    if (s.relu)
      for (auto& v : x.data()) v = v > Real(0) ? v : Real(0);
    if (s.residual) {
      detail::require(s.in == s.out, "residual layer needs equal input and output widths");
      for (std::size_t t = 0; t < x.rows(); ++t) {
        const Real* own = c.input.row(topo ? topo->own[t] : t);
        Real* xt = x.row(t);
        for (std::size_t i = 0; i < s.out; ++i) xt[i] += own[i];
      }
    }
  }
  if (p.arch == Arch::retexo_block && p.residual) {
    const auto& in = tape.layers.front().input;
    detail::require(in.cols() == x.cols(), "residual block needs equal input and output widths");
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const Real* own = in.row(first_topology ? first_topology->own[t] : t);
      Real* xt = x.row(t);
      for (std::size_t i = 0; i < x.cols(); ++i) xt[i] += own[i];
    }
  }
  tape.output = std::move(x);
  return tape;
}

/// Accumulates parameter gradients of sum_t <d_output[t], output[t]> into
/// `grads`. Input gradients are produced only when `d_input` is given.
template <class Real>
void backward(const BasicParams<Real>& p, const Tape<Real>& tape, std::span<const Topology> topologies,
              Rows<Real> d_output, BasicParams<Real>& grads, Rows<Real>* d_input = nullptr) {
  detail::require(grads.same_shape(p), "gradient buffer does not match the model");
  std::size_t next_topology = p.num_graph_layers();
  const bool block_residual = d_input && p.arch == Arch::retexo_block && p.residual;
  Rows<Real> d_block_output;
  if (block_residual) d_block_output = d_output;
  Rows<Real> dy = std::move(d_output);
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& s = p.layers[l];
    const auto& c = tape.layers[l];
    const Topology* topo = s.is_graph() ? &topologies[--next_topology] : nullptr;
    Rows<Real> dz = dy;
    if (s.relu) {
      auto& d = dz.data();
      const auto& z = c.pre.data();
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(z[i] > Real(0))) d[i] = Real(0);
    }
    const bool need_dx = l > 0 || d_input != nullptr;
    Rows<Real> dx;
    Rows<Real>* dx_ptr = need_dx ? &dx : nullptr;
    switch (s.kind) {
      case LayerKind::dense: detail::dense_backward(p, s, c, dz, grads, dx_ptr); break;
      case LayerKind::mean_concat: detail::mean_concat_backward(p, s, *topo, c, dz, grads, dx_ptr); break;
      case LayerKind::max_pool: detail::max_pool_backward(p, s, *topo, c, dz, grads, dx_ptr); break;
      case LayerKind::attention: detail::attention_backward(p, s, *topo, c, dz, grads, dx_ptr); break;
    }
    if (need_dx && s.residual) {
      for (std::size_t t = 0; t < dy.rows(); ++t) {
        Real* own = dx.row(topo ? topo->own[t] : t);
        const Real* dyt = dy.row(t);
        for (std::size_t i = 0; i < s.out; ++i) own[i] += dyt[i];
      }
    }
    dy = std::move(dx);
  }
  if (d_input) {
    if (block_residual) {
      const Topology* first = p.layers.front().is_graph() ? &topologies[0] : nullptr;
      for (std::size_t t = 0; t < d_block_output.rows(); ++t) {
        Real* own = dy.row(first ? first->own[t] : t);
        const Real* dt = d_block_output.row(t);
        for (std::size_t i = 0; i < d_block_output.cols(); ++i) own[i] += dt[i];
      }
    }
    *d_input = std::move(dy);
  }
}

// ---------------------------------------------------------------------------
// Loss

template <class Real>
struct LossResult {
  double loss = 0;         // mean cross-entropy over the rows
  std::size_t correct = 0;  // rows whose arg-max equals the label
  Rows<Real> d_logits;     // gradient of the mean loss
};

inline std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class Real>
LossResult<Real> softmax_cross_entropy(const Rows<Real>& logits, std::span<const std::int32_t> labels) {
  detail::require(labels.size() == logits.rows(), "one label per logit row is required");
  LossResult<Real> res;
  res.d_logits = Rows<Real>(logits.rows(), logits.cols());
  if (logits.rows() == 0) return res;
  const auto n = static_cast<Real>(logits.rows());
  const auto classes = logits.cols();
  double total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const Real* z = logits.row(r);
    const auto y = static_cast<std::size_t>(labels[r]);
    detail::require(labels[r] >= 0 && y < classes, "label out of range");
    const Real top = *std::max_element(z, z + classes);
    std::size_t best = 0;
    Real denom = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      denom += std::exp(z[k] - top);
      if (z[k] > z[best]) best = k;
    }
    res.correct += best == y;
    const Real log_denom = std::log(denom);
    total += static_cast<double>(log_denom - (z[y] - top));
    Real* d = res.d_logits.row(r);
    for (std::size_t k = 0; k < classes; ++k) d[k] = std::exp(z[k] - top - log_denom) / n;
    d[y] -= Real(1) / n;
  }
  res.loss = total / static_cast<double>(logits.rows());
  return res;
}

// ---------------------------------------------------------------------------
// Single-node conveniences

/// Rows [own, neigh...] and a one-target topology over them.
template <class Real>
std::pair<Rows<Real>, Topology> single_target(std::span<const Real> own, std::span<const std::vector<Real>> neigh) {
  Rows<Real> x(1 + neigh.size(), own.size());
  std::copy(own.begin(), own.end(), x.row(0));
  std::vector<std::uint32_t> nbrs;
  for (std::size_t k = 0; k < neigh.size(); ++k) {
    detail::require(neigh[k].size() == own.size(), "neighbor vector length differs from own vector");
    std::copy(neigh[k].begin(), neigh[k].end(), x.row(k + 1));
    nbrs.push_back(static_cast<std::uint32_t>(k + 1));
  }
  Topology topo;
  topo.num_sources = x.rows();
  topo.add_target(0, nbrs);
  return {std::move(x), std::move(topo)};
}

template <class Real>
std::pair<std::vector<Real>, Tape<Real>> forward_mlp(const BasicParams<Real>& p, std::span<const Real> x) {
  detail::require(p.num_graph_layers() == 0, "forward_mlp needs a model without graph layers");
  detail::require(!p.layers.empty() && x.size() == p.layers.front().in,
                  "input length " + std::to_string(x.size()) + " does not match the model");
  Rows<Real> in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0));
  auto tape = forward(p, std::move(in), {});
  std::vector<Real> logits(tape.output.row(0), tape.output.row(0) + tape.output.cols());
  return {std::move(logits), std::move(tape)};
}

/// The first layer's COMBINE(own, AGGR(neigh)). Mean and max-pool return the
/// concatenated vector that enters the weight; attention returns the
/// attention-weighted, head-concatenated output before activation.
template <class Real>
std::vector<Real> combine_aggregate(const BasicParams<Real>& p, std::span<const Real> own,
                                    std::span<const std::vector<Real>> neigh) {
  detail::require(!p.layers.empty() && p.layers.front().is_graph(), "model has no aggregation layer");
  detail::require(own.size() == p.layers.front().in, "own vector length does not match the model");
  auto [x, topo] = single_target<Real>(own, neigh);
  BasicParams<Real> head = p;
  head.layers.resize(1);
  head.layers.front().relu = false;
  head.layers.front().residual = false;
  head.residual = false;
  auto tape = forward(head, std::move(x), std::span<const Topology>(&topo, 1));
  const auto& c = tape.layers.front();
  const auto& rows = p.layers.front().kind == LayerKind::attention ? c.pre : c.combined;
  return {rows.row(0), rows.row(0) + rows.cols()};
}

template <class Real>
struct LossAndGrad {
  double loss = 0;
  BasicParams<Real> grads;
};

/// Cross-entropy of one node and the gradient of every parameter. Models
/// without graph layers ignore `neigh`.
template <class Real>
LossAndGrad<Real> loss_and_grad(const BasicParams<Real>& p, std::span<const Real> own,
                                std::span<const std::vector<Real>> neigh, std::int32_t label) {
  LossAndGrad<Real> out{0, p.zeros_like()};
  std::vector<Topology> topo;
  Rows<Real> x;
  if (p.num_graph_layers() == 0) {
    x = Rows<Real>(1, own.size());
    std::copy(own.begin(), own.end(), x.row(0));
  } else {
    detail::require(p.num_graph_layers() == 1, "loss_and_grad handles a single aggregation layer");
    auto st = single_target<Real>(own, neigh);
    x = std::move(st.first);
    topo.push_back(std::move(st.second));
  }
  auto tape = forward(p, std::move(x), topo);
  const std::int32_t labels[1] = {label};
  auto l = softmax_cross_entropy(tape.output, labels);
  out.loss = l.loss;
  backward(p, tape, topo, std::move(l.d_logits), out.grads);
  return out;
}

/// Pass/fail bits of every piecewise decision the forward pass made (ReLU
/// signs, max-pool winners, LeakyReLU signs). Two passes with equal patterns
/// lie on the same smooth piece of the loss.
template <class Real>
std::vector<std::int64_t> activation_pattern(const BasicParams<Real>& p, const Tape<Real>& tape) {
  std::vector<std::int64_t> bits;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& s = p.layers[l];
    const auto& c = tape.layers[l];
    if (s.relu)
      for (auto v : c.pre.data()) bits.push_back(v > Real(0));
    if (s.kind == LayerKind::max_pool) {
      for (auto v : c.pool_pre.data()) bits.push_back(v > Real(0));
      bits.insert(bits.end(), c.argmax.begin(), c.argmax.end());
    }
    if (s.kind == LayerKind::attention)
      for (auto v : c.score) bits.push_back(v > Real(0));
  }
  return bits;
}

}  // namespace retexo::nn
