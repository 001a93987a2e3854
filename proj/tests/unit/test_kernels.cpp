#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <retexo/gradcheck.hpp>
#include <retexo/kernels.hpp>
#include <retexo/optim.hpp>
#include <retexo/params.hpp>

#include "test_util.hpp"

using namespace retexo;
using namespace retexo::nn;

namespace {

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// x W + b for a row-major (in x out) weight, written the long way.
std::vector<double> affine_ref(const std::vector<double>& x, const Tensor<float>& w, const Tensor<float>* b) {
  std::vector<double> y(w.cols, 0.0);
  for (std::size_t j = 0; j < w.cols; ++j) {
    double acc = b ? b->data[j] : 0.0;
    for (std::size_t i = 0; i < w.rows; ++i) acc += x[i] * w.data[i * w.cols + j];
    y[j] = acc;
  }
  return y;
}

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

std::vector<std::vector<float>> random_rows(std::size_t count, std::size_t width, std::uint64_t seed) {
  std::vector<std::vector<float>> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(random_vector(width, seed * 131 + k));
  return out;
}

}  // namespace

TEST(ForwardMlp, ZeroWeightsGiveZeroLogits) {
  auto p = make_mlp(5, 4, 3, 1).zeros_like();
  auto x = random_vector(5, 2);
  auto [logits, tape] = forward_mlp<float>(p, x);
  EXPECT_EQ(logits, std::vector<float>(3, 0.0f));
}

TEST(ForwardMlp, IdentityWeightsPickFirstColumn) {
  auto p = make_mlp(2, 2, 2, 0).zeros_like();
  // hidden = relu(x I), logits = hidden W2 + b2
  p.tensors[0].data = {1, 0, 0, 1};
  p.tensors[2].data = {0.5f, -2.0f, 3.0f, 4.0f};
  p.tensors[3].data = {0.25f, 0.75f};
  const std::vector<float> x{1, 0};
  auto [logits, tape] = forward_mlp<float>(p, x);
  EXPECT_FLOAT_EQ(logits[0], 0.5f + 0.25f);
  EXPECT_FLOAT_EQ(logits[1], -2.0f + 0.75f);
}

TEST(ForwardMlp, MatchesStraightforwardImplementation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = make_mlp(7, 6, 4, seed);
    for (auto& b : p.tensors[1].data) b = 0.1f;
    auto x = random_vector(7, 100 + seed);
    auto [logits, tape] = forward_mlp<float>(p, x);
    auto h = affine_ref(widen(x), p.tensors[0], &p.tensors[1]);
    for (auto& v : h) v = std::max(v, 0.0);
    auto ref = affine_ref(h, p.tensors[2], &p.tensors[3]);
    ASSERT_EQ(logits.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(logits[k], ref[k], 1e-6);
  }
}

TEST(ForwardMlp, RejectsWrongInputLength) {
  auto p = make_mlp(3, 2, 2, 0);
  const std::vector<float> x{1, 2};
  EXPECT_THROW(forward_mlp<float>(p, x), ShapeError);
}

TEST(CombineAggregate, MeanConcatenatesOwnAndNeighborMean) {
  auto p = make_retexo_block(Aggregator::mean, 2, 3, 2, {}, 0);
  const std::vector<float> own{1, 2};
  const std::vector<std::vector<float>> neigh{{3, 4}, {5, 6}};
  EXPECT_EQ(combine_aggregate<float>(p, own, neigh), (std::vector<float>{1, 2, 4, 5}));
  EXPECT_EQ(combine_aggregate<float>(p, own, {}), (std::vector<float>{1, 2, 0, 0}));
}

TEST(CombineAggregate, MaxPoolMatchesComposition) {
  auto p = make_retexo_block(Aggregator::max_pool, 3, 4, 2, {.pool_dim = 5}, 7);
  for (auto& b : p.tensors[1].data) b = 0.05f;
  const auto own = random_vector(3, 1);
  const auto neigh = random_rows(1, 3, 2);
  auto pooled = affine_ref(widen(neigh[0]), p.tensors[0], &p.tensors[1]);
  for (auto& v : pooled) v = std::max(v, 0.0);
  auto got = combine_aggregate<float>(p, own, neigh);
  ASSERT_EQ(got.size(), 3u + 5u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(got[i], own[i]);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(got[3 + i], pooled[i], 1e-6);

  const auto many = random_rows(4, 3, 9);
  auto got_many = combine_aggregate<float>(p, own, many);
  for (std::size_t i = 0; i < 5; ++i) {
    double best = -1e300;
    for (const auto& n : many) {
      auto q = affine_ref(widen(n), p.tensors[0], &p.tensors[1]);
      best = std::max(best, std::max(q[i], 0.0));
    }
    EXPECT_NEAR(got_many[3 + i], best, 1e-6);
  }
}

TEST(CombineAggregate, AttentionMatchesReferenceScoring) {
  const std::size_t in = 3, out = 4, heads = 2, f = out / heads;
  auto p = make_retexo_block(Aggregator::attention, in, out, 2, {.heads = heads}, 5);
  for (auto& b : p.tensors[3].data) b = -0.1f;
  const auto& w = p.tensors[0];
  const auto& a_self = p.tensors[1];
  const auto& a_neigh = p.tensors[2];
  const auto own = random_vector(in, 3);
  const auto neigh = random_rows(3, in, 4);

  std::vector<std::vector<double>> z{affine_ref(widen(own), w, nullptr)};
  for (const auto& n : neigh) z.push_back(affine_ref(widen(n), w, nullptr));
  std::vector<double> ref(out, 0.0);
  for (std::size_t k = 0; k < heads; ++k) {
    std::vector<double> s;
    for (const auto& zu : z) {
      double e = 0;
      for (std::size_t i = 0; i < f; ++i)
        e += a_self.data[k * f + i] * z[0][k * f + i] + a_neigh.data[k * f + i] * zu[k * f + i];
      s.push_back(e > 0 ? e : kLeakySlope * e);
    }
    const double top = *std::max_element(s.begin(), s.end());
    double denom = 0;
    for (auto e : s) denom += std::exp(e - top);
    for (std::size_t c = 0; c < z.size(); ++c)
      for (std::size_t i = 0; i < f; ++i) ref[k * f + i] += std::exp(s[c] - top) / denom * z[c][k * f + i];
  }
  auto got = combine_aggregate<float>(p, own, neigh);
  ASSERT_EQ(got.size(), out);
  for (std::size_t i = 0; i < out; ++i) EXPECT_NEAR(got[i], ref[i] - 0.1, 1e-5);
}

TEST(CombineAggregate, PermutationInvariant) {
  const GraphModelOptions opt{.heads = 2, .pool_dim = 6};
  for (auto agg : {Aggregator::mean, Aggregator::max_pool, Aggregator::attention}) {
    auto p = make_retexo_block(agg, 4, 4, 3, opt, 11);
    const auto own = random_vector(4, 12);
    auto neigh = random_rows(5, 4, 13);
    const auto base = combine_aggregate<float>(p, own, neigh);
    std::vector<std::size_t> order(neigh.size());
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(99);
    for (int trial = 0; trial < 5; ++trial) {
      rng.shuffle(std::span<std::size_t>(order));
      std::vector<std::vector<float>> perm;
      for (auto i : order) perm.push_back(neigh[i]);
      const auto got = combine_aggregate<float>(p, own, perm);
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], base[i], 1e-6) << to_string(agg);
    }
  }
}

TEST(CombineAggregate, RejectsLengthMismatch) {
  auto p = make_retexo_block(Aggregator::mean, 2, 3, 2, {}, 0);
  const std::vector<float> own{1, 2};
  const std::vector<std::vector<float>> neigh{{3, 4, 5}};
  EXPECT_THROW(combine_aggregate<float>(p, own, neigh), ShapeError);
}

TEST(Loss, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 7u, 40u}) {
    Rows<float> logits(3, c);
    for (auto& v : logits.data()) v = 0.3f;
    const std::vector<std::int32_t> labels{0, 1, 1};
    EXPECT_NEAR(softmax_cross_entropy(logits, labels).loss, std::log(static_cast<double>(c)), 1e-6);
  }
}

TEST(Loss, ConfidentCorrectLogitsApproachZero) {
  Rows<float> logits(1, 4);
  logits.row(0)[2] = 60.0f;
  const std::vector<std::int32_t> labels{2};
  auto r = softmax_cross_entropy(logits, labels);
  EXPECT_GE(r.loss, 0.0);
  EXPECT_LT(r.loss, 1e-12);
  EXPECT_EQ(r.correct, 1u);
}

TEST(Loss, SingleNodeGradientIsNonNegativeLoss) {
  auto p = make_mlp(4, 5, 3, 2);
  auto x = random_vector(4, 1);
  auto r = loss_and_grad<float>(p, x, {}, 1);
  EXPECT_GE(r.loss, 0.0);
  EXPECT_TRUE(r.grads.same_shape(p));
}

TEST(GradCheck, AllArchitecturesAcrossSeeds) {
  for (auto arch : {Arch::mlp, Arch::gcn, Arch::sage, Arch::gat})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto r = grad_check(arch, {4, 4, 2}, seed);
      EXPECT_LT(r.max_relative_error, 1e-4) << to_string(arch) << " seed " << seed;
      EXPECT_GT(r.checked, 0u);
    }
}

TEST(GradCheck, MlpExampleDims) { EXPECT_LT(grad_check(Arch::mlp, {4, 3, 2}, 0).max_relative_error, 1e-4); }

TEST(GradCheck, ResidualBlockAndMultiLayerGnn) {
  auto block = make_retexo_block(Aggregator::mean, 4, 5, 4, {.residual = true}, 3);
  EXPECT_LT(grad_check_model(block.cast<double>(), 3).max_relative_error, 1e-4);
  for (auto arch : {Arch::gcn, Arch::sage, Arch::gat}) {
    auto gnn = make_gnn(arch, 3, 3, 4, 2, {.heads = 2, .pool_dim = 4, .residual = true}, 8);
    auto r = grad_check_model(gnn.cast<double>(), 8);
    EXPECT_LT(r.max_relative_error, 1e-4) << to_string(arch);
  }
}

TEST(GradCheck, ZeroInputGivesZeroGradientForBiasFreeFirstLayer) {
  auto p = make_gnn(Arch::gcn, 2, 3, 4, 2, {}, 1);
  Topology t0;
  t0.num_sources = 3;
  const std::uint32_t n0[] = {1, 2}, n1[] = {0};
  t0.add_target(0, n0);
  t0.add_target(1, n1);
  Topology t1;
  t1.num_sources = 2;
  const std::uint32_t m0[] = {1};
  t1.add_target(0, m0);
  const std::vector<Topology> topo{t0, t1};
  auto tape = forward(p, Rows<float>(3, 3), topo);
  const std::vector<std::int32_t> labels{1};
  auto loss = softmax_cross_entropy(tape.output, labels);
  auto grads = p.zeros_like();
  backward(p, tape, topo, std::move(loss.d_logits), grads);
  for (auto g : grads.tensors[0].data) EXPECT_EQ(g, 0.0f);
}

TEST(Shapes, RandomArchitecturesChain) {
  CounterRng rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    const auto arch = std::array{Arch::gcn, Arch::sage, Arch::gat}[rng.below(3)];
    const std::size_t layers = 1 + rng.below(4), heads = 1 + rng.below(3);
    const std::size_t in = 1 + rng.below(6), hidden = heads * (1 + rng.below(4)), out = 1 + rng.below(5);
    auto p = make_gnn(arch, layers, in, hidden, out, {.heads = heads, .pool_dim = 3, .residual = rng.below(2) == 1},
                      static_cast<std::uint64_t>(trial));
    // a chain: target t of layer l has own row t and neighbor row t+1 of the previous layer
    std::size_t rows = layers + 4;
    std::vector<Topology> topo;
    for (std::size_t l = 0; l < layers; ++l) {
      Topology t;
      t.num_sources = rows;
      for (std::uint32_t r = 0; r + 1 < rows; ++r) {
        const std::uint32_t n[] = {r + 1};
        t.add_target(r, n);
      }
      rows -= 1;
      topo.push_back(std::move(t));
    }
    Rows<float> x(layers + 4, in);
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    auto tape = forward(p, x, topo);
    EXPECT_EQ(tape.output.rows(), 4u);
    EXPECT_EQ(tape.output.cols(), out);
    for (auto v : tape.output.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Params, AttentionWidthMustSplitAcrossHeads) {
  EXPECT_THROW(make_retexo_block(Aggregator::attention, 4, 6, 2, {.heads = 4}, 0), ShapeError);
  EXPECT_NO_THROW(make_retexo_block(Aggregator::attention, 4, 8, 2, {.heads = 4}, 0));
}

TEST(Params, InitializationIsSeeded) {
  EXPECT_EQ(make_mlp(5, 4, 3, 1), make_mlp(5, 4, 3, 1));
  EXPECT_NE(make_mlp(5, 4, 3, 1), make_mlp(5, 4, 3, 2));
  auto p = make_mlp(5, 4, 3, 1);
  EXPECT_EQ(p.num_floats(), 5u * 4 + 4 + 4 * 3 + 3);
  EXPECT_EQ(p.layer_floats(0), 24u);
  EXPECT_EQ(p.layer_floats(1), 15u);
}

TEST(Checkpoint, RoundTripsEveryArchitecture) {
  test::TempDir dir;
  std::vector<ModelParams> models{make_mlp(6, 5, 3, 1),
                                  make_retexo_block(Aggregator::max_pool, 3, 4, 3, {.pool_dim = 7, .residual = true}, 2),
                                  make_gnn(Arch::gat, 3, 6, 8, 3, {.heads = 4, .residual = true}, 3)};
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto file = dir.path() / ("m" + std::to_string(i) + ".ckpt");
    save_checkpoint(models[i], file);
    EXPECT_EQ(load_checkpoint(file), models[i]);
  }
}

TEST(Checkpoint, TruncatedFileIsADataError) {
  test::TempDir dir;
  const auto file = dir.path() / "m.ckpt";
  save_checkpoint(make_mlp(3, 3, 2, 0), file);
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 3);
  EXPECT_THROW(load_checkpoint(file), DataError);
}

TEST(Sgd, PlainStepWithoutMomentumOrDecay) {
  auto p = make_mlp(3, 2, 2, 0);
  const auto before = p;
  OptimizerState opt({.learning_rate = 0.5, .momentum = 0, .weight_decay = 0}, p);
  auto g = p.zeros_like();
  g.for_each_value([i = 0](float& x) mutable { x = 0.1f * static_cast<float>(++i); });
  sgd_step(p, opt, g);
  for (std::size_t t = 0; t < p.tensors.size(); ++t)
    for (std::size_t i = 0; i < p.tensors[t].size(); ++i)
      EXPECT_EQ(p.tensors[t].data[i], before.tensors[t].data[i] - 0.5f * g.tensors[t].data[i]);
}

TEST(Sgd, ConstantGradientSecondDeltaIncludesMomentum) {
  auto p = make_mlp(2, 2, 2, 0).zeros_like();
  OptimizerState opt({.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 0}, p);
  auto g = p.zeros_like();
  g.for_each_value([](float& x) { x = 1.0f; });
  sgd_step(p, opt, g);
  const float after_one = p.tensors[0].data[0];
  sgd_step(p, opt, g);
  EXPECT_NEAR(after_one - p.tensors[0].data[0], 0.1 * 1.0 * 1.9, 1e-7);
}

TEST(Sgd, FiveStepsMatchScalarRecurrence) {
  auto p = make_mlp(4, 3, 2, 6);
  const auto start = p;
  const OptimizerConfig cfg{.learning_rate = 0.05, .momentum = 0.9, .weight_decay = 5e-4};
  OptimizerState opt(cfg, p);
  std::vector<ModelParams> grads;
  for (int s = 0; s < 5; ++s) {
    auto g = p.zeros_like();
    CounterRng rng(static_cast<std::uint64_t>(s) + 40);
    g.for_each_value([&](float& x) { x = static_cast<float>(rng.normal()); });
    grads.push_back(g);
    sgd_step(p, opt, g);
  }
  for (std::size_t t = 0; t < p.tensors.size(); ++t)
    for (std::size_t i = 0; i < p.tensors[t].size(); ++i) {
      float w = start.tensors[t].data[i], v = 0;
      for (const auto& g : grads) {
        v = 0.9f * v + g.tensors[t].data[i] + 5e-4f * w;
        w -= 0.05f * v;
      }
      EXPECT_NEAR(p.tensors[t].data[i], w, 1e-7);
    }
}

TEST(Sgd, RejectsShapeMismatchAndBadConfig) {
  auto p = make_mlp(3, 2, 2, 0);
  OptimizerState opt({}, p);
  EXPECT_THROW(sgd_step(p, opt, make_mlp(3, 3, 2, 0)), ShapeError);
  EXPECT_THROW(OptimizerState({.learning_rate = 0}, p), ConfigError);
}

TEST(AverageModels, IdempotentAndSymmetric) {
  auto p = make_mlp(4, 3, 2, 1);
  const std::vector<ModelParams> same{p, p};
  EXPECT_EQ(average_models(same), p);
  auto neg = p;
  neg.for_each_value([](float& x) { x = -x; });
  const std::vector<ModelParams> pm{p, neg};
  average_models(pm).for_each_value([](float& x) { EXPECT_EQ(x, 0.0f); });
}

TEST(AverageModels, MatchesElementwiseLoop) {
  const std::vector<ModelParams> ms{make_mlp(4, 3, 2, 1), make_mlp(4, 3, 2, 2), make_mlp(4, 3, 2, 3)};
  auto mean = average_models(ms);
  for (std::size_t t = 0; t < mean.tensors.size(); ++t)
    for (std::size_t i = 0; i < mean.tensors[t].size(); ++i) {
      double s = 0;
      for (const auto& m : ms) s += m.tensors[t].data[i];
      EXPECT_NEAR(mean.tensors[t].data[i], s / 3, 1e-7);
    }
  const std::vector<ModelParams> reversed{ms[2], ms[1], ms[0]};
  auto back = average_models(reversed);
  for (std::size_t t = 0; t < mean.tensors.size(); ++t)
    for (std::size_t i = 0; i < mean.tensors[t].size(); ++i)
      EXPECT_NEAR(back.tensors[t].data[i], mean.tensors[t].data[i], 1e-7);
}

TEST(AverageModels, RejectsEmptyAndMismatched) {
  EXPECT_THROW(average_models({}), ConfigError);
  const std::vector<ModelParams> ms{make_mlp(4, 3, 2, 1), make_mlp(4, 4, 2, 1)};
  EXPECT_THROW(average_models(ms), ShapeError);
}
