#pragma once

#include <span>

#include "errors.hpp"
#include "params.hpp"

namespace retexo::nn {

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
  }
};

/// SGD with classic momentum; weight decay is folded into the gradient.
struct OptimizerState {
  OptimizerConfig config;
  ModelParams velocity;

  OptimizerState() = default;
  OptimizerState(const OptimizerConfig& cfg, const ModelParams& like) : config(cfg), velocity(like.zeros_like()) {
    cfg.validate();
  }
};

/// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
inline void sgd_step(ModelParams& params, OptimizerState& opt, const ModelParams& grads) {
  if (!params.same_shape(grads) || !params.same_shape(opt.velocity))
    throw ShapeError("sgd_step: parameter, gradient and velocity shapes differ");
  const auto mu = static_cast<float>(opt.config.momentum);
  const auto wd = static_cast<float>(opt.config.weight_decay);
  const auto lr = static_cast<float>(opt.config.learning_rate);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].data;
    auto& v = opt.velocity.tensors[t].data;
    const auto& g = grads.tensors[t].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * p[i];
      p[i] -= lr * v[i];
    }
  }
}

/// Elementwise mean, accumulated in list order.
inline ModelParams average_models(std::span<const ModelParams> models) {
  if (models.empty()) throw ConfigError("average_models needs at least one model");
  ModelParams mean = models.front().zeros_like();
  for (const auto& m : models) {
    if (!m.same_shape(mean)) throw ShapeError("average_models: models have different shapes");
    for (std::size_t t = 0; t < m.tensors.size(); ++t) {
      auto& acc = mean.tensors[t].data;
      const auto& src = m.tensors[t].data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
    }
  }
  const auto n = static_cast<float>(models.size());
  mean.for_each_value([n](float& x) { x /= n; });
  return mean;
}

}  // namespace retexo::nn
