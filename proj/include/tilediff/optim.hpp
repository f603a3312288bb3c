#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "tilediff/error.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.03;
};

/// First/second moment buffers for one parameter tensor.
template <class T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t step = 0;
};

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// The step is rejected (nothing is modified) if any gradient is non-finite.
template <class T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, const AdamWConfig& cfg,
                const std::string& name = "param") {
  if (grad.shape() != param.shape()) {
    throw DimensionError("adamw_step: gradient " + shape_str(grad.shape()) + " for " + name + " " +
                         shape_str(param.shape()));
  }
  if (state.step == 0 && state.m.empty()) {
    state.m = Tensor<T>(param.shape());
    state.v = Tensor<T>(param.shape());
  }
  if (state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw DimensionError("adamw_step: optimizer state shape does not match " + name);
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(double(grad[i]))) {
      throw NumericError("adamw_step: non-finite gradient in " + name + " at element " + std::to_string(i));
    }
  }
  state.step += 1;
  const double bc1 = 1 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1 - std::pow(cfg.beta2, double(state.step));
  auto p = param.data();
  auto g = grad.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = cfg.beta1 * double(m[i]) + (1 - cfg.beta1) * gi;
    const double vi = cfg.beta2 * double(v[i]) + (1 - cfg.beta2) * gi * gi;
    m[i] = T(mi);
    v[i] = T(vi);
    double pi = double(p[i]) * (1 - cfg.lr * cfg.weight_decay);
    pi -= cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
    p[i] = T(pi);
  }
}

}  // namespace tilediff
