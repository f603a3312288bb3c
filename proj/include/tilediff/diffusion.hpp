#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tilediff/error.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

struct ScheduleConfig {
  std::string type = "linear";
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::size_t steps = 1000;  // T
};

/// Discrete DDPM schedule with a continuous extension: log(alpha_bar) is
/// interpolated linearly between integer timesteps, with alpha_bar(0) = 1.
/// alpha = sqrt(alpha_bar), sigma = sqrt(1 - alpha_bar), lambda = log(alpha / sigma).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(ScheduleConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.type != "linear") throw ConfigError("unsupported schedule type '" + cfg_.type + "'");
    if (cfg_.steps < 2) throw ConfigError("schedule needs at least two steps");
    if (!(0 < cfg_.beta_min && cfg_.beta_min < cfg_.beta_max && cfg_.beta_max < 1)) {
      throw ConfigError("schedule needs 0 < beta_min < beta_max < 1");
    }
    const std::size_t n = cfg_.steps;
    betas_.resize(n + 1, 0.0);
    log_ab_.resize(n + 1, 0.0);
    for (std::size_t t = 1; t <= n; ++t) {
      betas_[t] = cfg_.beta_min + (cfg_.beta_max - cfg_.beta_min) * double(t - 1) / double(n - 1);
      log_ab_[t] = log_ab_[t - 1] + std::log1p(-betas_[t]);
    }
  }

  const ScheduleConfig& config() const { return cfg_; }
  std::size_t steps() const { return cfg_.steps; }

  double beta(std::size_t t) const { return betas_.at(check(t)); }
  double alpha_bar(std::size_t t) const { return std::exp(log_ab_.at(t)); }

  double log_alpha_bar_at(double t) const {
    if (!(t >= 0 && t <= double(cfg_.steps))) throw ConfigError("timestep " + std::to_string(t) + " outside [0, T]");
    const auto k = std::min<std::size_t>(std::size_t(std::floor(t)), cfg_.steps - 1);
    const double frac = t - double(k);
    return log_ab_[k] + frac * (log_ab_[k + 1] - log_ab_[k]);
  }
  double alpha_at(double t) const { return std::exp(0.5 * log_alpha_bar_at(t)); }
  double sigma_at(double t) const { return std::sqrt(-std::expm1(log_alpha_bar_at(t))); }
  double lambda_at(double t) const {
    const double l = log_alpha_bar_at(t);
    return 0.5 * l - 0.5 * std::log(-std::expm1(l));
  }

  /// Inverse of lambda_at on [0, T].
  double t_from_lambda(double lambda) const {
    const double target = -std::log1p(std::exp(-2.0 * lambda));  // log alpha_bar
    if (target > 0 || target < log_ab_.back()) {
      throw ConfigError("log-SNR " + std::to_string(lambda) + " outside the schedule's range");
    }
    // log_ab_ is strictly decreasing; find k with log_ab_[k] >= target >= log_ab_[k+1].
    auto it = std::lower_bound(log_ab_.begin(), log_ab_.end(), target, std::greater<>());
    std::size_t k1 = std::size_t(it - log_ab_.begin());
    if (k1 == 0) return 0.0;
    const std::size_t k = k1 - 1;
    return double(k) + (log_ab_[k] - target) / (log_ab_[k] - log_ab_[k1]);
  }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > cfg_.steps) throw ConfigError("timestep " + std::to_string(t) + " outside [1, T]");
    return t;
  }

  ScheduleConfig cfg_;
  std::vector<double> betas_;
  std::vector<double> log_ab_;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, elementwise.
inline Tensor<float> add_noise(const Tensor<float>& x0, const Tensor<float>& eps, std::size_t t,
                               const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) throw DimensionError("add_noise: noise shape " + shape_str(eps.shape()) + " != " + shape_str(x0.shape()));
  if (t < 1 || t > sched.steps()) throw ConfigError("add_noise: timestep " + std::to_string(t) + " outside [1, T]");
  const double a = sched.alpha_at(double(t)), s = sched.sigma_at(double(t));
  Tensor<float> xt(x0.shape());
  for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = float(a * x0[i] + s * eps[i]);
  return xt;
}

/// Batched noising: x0/eps are [B, ...], one timestep per batch element.
inline Tensor<float> add_noise_batch(const Tensor<float>& x0, const Tensor<float>& eps, std::span<const std::size_t> t,
                                     const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) throw DimensionError("add_noise: noise shape mismatch");
  if (x0.dim(0) != t.size()) throw DimensionError("add_noise: need one timestep per batch element");
  const std::size_t per = x0.size() / t.size();
  Tensor<float> xt(x0.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 1 || t[b] > sched.steps()) throw ConfigError("add_noise: timestep " + std::to_string(t[b]) + " outside [1, T]");
    const double a = sched.alpha_at(double(t[b])), s = sched.sigma_at(double(t[b]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) xt[i] = float(a * x0[i] + s * eps[i]);
  }
  return xt;
}

/// Mean squared error between predicted and true noise over batch and elements.
/// `predict(xt, t)` returns a tensor shaped like xt.
template <class Predict>
double epsilon_loss(Predict&& predict, const Tensor<float>& x0, const Tensor<float>& eps, std::span<const std::size_t> t,
                    const NoiseSchedule& sched) {
  const Tensor<float> xt = add_noise_batch(x0, eps, t, sched);
  const Tensor<float> pred = predict(xt, t);
  if (pred.shape() != eps.shape()) throw DimensionError("epsilon_loss: prediction shape " + shape_str(pred.shape()));
  const std::size_t batch = t.size(), per = x0.size() / batch;
  double total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) s += (double(pred[i]) - eps[i]) * (double(pred[i]) - eps[i]);
    if (!std::isfinite(s)) throw NumericError("epsilon_loss: non-finite loss at batch index " + std::to_string(b));
    total += s;
  }
  return total / double(x0.size());
}

struct GuidanceConfig {
  double w = 1.0;
};

/// eps_uncond + w (eps_cond - eps_uncond); w = 0 and w = 1 return the operands exactly.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double w) {
  if (eps_uncond.shape() != eps_cond.shape()) {
    throw DimensionError("cfg_combine: shapes " + shape_str(eps_uncond.shape()) + " and " + shape_str(eps_cond.shape()));
  }
  if (!(w >= 0)) throw ConfigError("guidance scale must be non-negative");
  if (w == 1.0) return eps_cond;
  if (w == 0.0) return eps_uncond;
  Tensor<T> out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(double(eps_uncond[i]) + w * (double(eps_cond[i]) - double(eps_uncond[i])));
  return out;
}

}  // namespace tilediff
