#pragma once

// Reverse-process samplers. All three run from t = T down to t = 1 on their own
// grid, then take the posterior mean x0 = (x_1 - sigma_1 eps) / alpha_1.
//   ddpm: ancestral chain over an integer subsequence of timesteps
//   ddim: deterministic first-order step, grid uniform in t
//   dpm2: second-order exponential integrator (midpoint in lambda), grid uniform in lambda

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilediff/backbone.hpp"
#include "tilediff/diffusion.hpp"
#include "tilediff/error.hpp"
#include "tilediff/rng.hpp"

namespace tilediff {

enum class SamplerKind { ddpm, ddim, dpm2 };

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::ddpm: return "ddpm";
    case SamplerKind::ddim: return "ddim";
    case SamplerKind::dpm2: return "dpm2";
  }
  return "?";
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddpm") return SamplerKind::ddpm;
  if (s == "ddim") return SamplerKind::ddim;
  if (s == "dpm2") return SamplerKind::dpm2;
  throw ConfigError("unknown sampler '" + s + "' (expected ddpm, ddim or dpm2)");
}

struct SamplerConfig {
  SamplerKind kind = SamplerKind::dpm2;
  std::size_t steps = 50;
  GuidanceConfig guidance;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& sched) const {
    if (steps < 1) throw ConfigError("sampler needs steps >= 1");
    if (kind == SamplerKind::dpm2 && steps < 2) throw ConfigError("dpm2 needs steps >= 2");
    if (kind == SamplerKind::ddpm && steps > sched.steps() - 1) {
      throw ConfigError("ddpm steps must be <= T - 1 = " + std::to_string(sched.steps() - 1));
    }
    if (!(guidance.w >= 0)) throw ConfigError("guidance scale must be non-negative");
  }
};

// Stream keys for KeyedRng(seed, key, step).
inline constexpr std::uint64_t kInitNoiseKey = 0x1a17;
inline constexpr std::uint64_t kStepNoiseKey = 0x57e9;

/// eps(x, t) after guidance.
template <class T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>&, double)>;

/// Raw model: eps(x, t, conditional).
template <class T>
using GuidedModel = std::function<Tensor<T>(const Tensor<T>&, double, bool)>;

/// Applies classifier-free guidance. w = 1 and w = 0 evaluate only one branch,
/// which is what makes them bit-identical to plain conditional/unconditional sampling.
template <class T>
EpsFn<T> guided(GuidedModel<T> model, double w) {
  if (!(w >= 0)) throw ConfigError("guidance scale must be non-negative");
  return [model = std::move(model), w](const Tensor<T>& x, double t) {
    if (w == 1.0) return model(x, t, true);
    if (w == 0.0) return model(x, t, false);
    return cfg_combine(model(x, t, false), model(x, t, true), w);
  };
}

namespace detail {

template <class T>
void check_finite(const Tensor<T>& x, std::size_t step, const char* who) {
  for (const T v : x.data())
    if (!std::isfinite(double(v))) throw NumericError(std::string(who) + ": non-finite state at step " + std::to_string(step));
}

template <class T>
Tensor<T> eval_eps(const EpsFn<T>& eps, const Tensor<T>& x, double t) {
  Tensor<T> e = eps(x, t);
  if (e.shape() != x.shape()) throw DimensionError("model returned " + shape_str(e.shape()) + " for state " + shape_str(x.shape()));
  return e;
}

/// a x + b e, elementwise, in double.
template <class T>
Tensor<T> axpby(double a, const Tensor<T>& x, double b, const Tensor<T>& e) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(a * double(x[i]) + b * double(e[i]));
  return out;
}

}  // namespace detail

/// Timesteps T = t_0 > t_1 > ... > t_steps = 1, uniform in t.
inline std::vector<double> ddim_grid(std::size_t steps, const NoiseSchedule& sched) {
  const double big = double(sched.steps());
  std::vector<double> g(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) g[k] = big - double(k) * (big - 1.0) / double(steps);
  g.back() = 1.0;
  return g;
}

/// Timesteps uniform in lambda between lambda(T) and lambda(1).
inline std::vector<double> dpm2_grid(std::size_t steps, const NoiseSchedule& sched) {
  const double big = double(sched.steps());
  const double l0 = sched.lambda_at(big), l1 = sched.lambda_at(1.0);
  std::vector<double> g(steps + 1);
  g.front() = big;
  g.back() = 1.0;
  for (std::size_t k = 1; k < steps; ++k) g[k] = sched.t_from_lambda(l0 + double(k) * (l1 - l0) / double(steps));
  return g;
}

/// Integer subsequence of [1, T], strictly decreasing, steps + 1 entries.
inline std::vector<std::size_t> ddpm_grid(std::size_t steps, const NoiseSchedule& sched) {
  const std::size_t big = sched.steps();
  std::vector<std::size_t> g(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k)
    g[k] = std::size_t(std::llround(double(big) - double(k) * double(big - 1) / double(steps)));
  for (std::size_t k = 1; k <= steps; ++k)
    if (g[k] >= g[k - 1]) throw ConfigError("ddpm grid collapsed; use fewer steps");
  return g;
}

/// Deterministic DDIM step from t to s < t.
template <class T>
Tensor<T> ddim_step(const EpsFn<T>& eps, const Tensor<T>& x, double t, double s, const NoiseSchedule& sched) {
  const Tensor<T> e = detail::eval_eps(eps, x, t);
  const double at = sched.alpha_at(t), st = sched.sigma_at(t), as = sched.alpha_at(s), ss = sched.sigma_at(s);
  // x_s = a_s (x - s_t e) / a_t + s_s e
  return detail::axpby(as / at, x, ss - as * st / at, e);
}

/// Midpoint time of a dpm2 step: lambda halfway between the endpoints.
inline double dpm2_midpoint(double t_hi, double t_lo, const NoiseSchedule& sched) {
  const double lh = sched.lambda_at(t_hi), ll = sched.lambda_at(t_lo);
  return sched.t_from_lambda(0.5 * (lh + ll));
}

/// Second-order exponential-integrator step from t_hi to t_lo in lambda space.
template <class T>
Tensor<T> dpm2_step(const EpsFn<T>& eps, const Tensor<T>& x, double t_hi, double t_lo, const NoiseSchedule& sched) {
  const double lh = sched.lambda_at(t_hi), ll = sched.lambda_at(t_lo);
  const double h = ll - lh;
  if (!(h > 0)) throw ConfigError("dpm2_step: degenerate interval, lambda(t_lo) must exceed lambda(t_hi)");
  const double tm = sched.t_from_lambda(lh + 0.5 * h);
  const double ai = sched.alpha_at(t_hi), am = sched.alpha_at(tm), sm = sched.sigma_at(tm);
  const double an = sched.alpha_at(t_lo), sn = sched.sigma_at(t_lo);
  const Tensor<T> e0 = detail::eval_eps(eps, x, t_hi);
  const Tensor<T> u = detail::axpby(am / ai, x, -sm * std::expm1(0.5 * h), e0);
  const Tensor<T> e1 = detail::eval_eps(eps, u, tm);
  return detail::axpby(an / ai, x, -sn * std::expm1(h), e1);
}

/// x0 estimate from the state at t = 1.
template <class T>
Tensor<T> terminal_step(const EpsFn<T>& eps, const Tensor<T>& x1, const NoiseSchedule& sched) {
  const Tensor<T> e = detail::eval_eps(eps, x1, 1.0);
  const double a = sched.alpha_at(1.0), s = sched.sigma_at(1.0);
  return detail::axpby(1.0 / a, x1, -s / a, e);
}

/// Runs the chosen sampler from x_T down to t = 1 (no terminal step).
template <class T>
Tensor<T> integrate_to_one(const EpsFn<T>& eps, Tensor<T> x, const SamplerConfig& cfg, const NoiseSchedule& sched) {
  cfg.validate(sched);
  const char* who = "sampler";
  switch (cfg.kind) {
    case SamplerKind::ddim: {
      const auto g = ddim_grid(cfg.steps, sched);
      for (std::size_t k = 0; k < cfg.steps; ++k) {
        x = ddim_step(eps, x, g[k], g[k + 1], sched);
        detail::check_finite(x, k, who);
      }
      break;
    }
    case SamplerKind::dpm2: {
      const auto g = dpm2_grid(cfg.steps, sched);
      for (std::size_t k = 0; k < cfg.steps; ++k) {
        x = dpm2_step(eps, x, g[k], g[k + 1], sched);
        detail::check_finite(x, k, who);
      }
      break;
    }
    case SamplerKind::ddpm: {
      const auto g = ddpm_grid(cfg.steps, sched);
      for (std::size_t k = 0; k < cfg.steps; ++k) {
        const std::size_t t = g[k], s = g[k + 1];
        const Tensor<T> e = detail::eval_eps(eps, x, double(t));
        const double abt = sched.alpha_bar(t), abs = sched.alpha_bar(s);
        const double at = std::sqrt(abt), st = std::sqrt(1.0 - abt);
        const double beta = 1.0 - abt / abs;
        // posterior q(x_s | x_t, x0_hat)
        const double c0 = std::sqrt(abs) * beta / (1.0 - abt);
        const double ct = std::sqrt(abt / abs) * (1.0 - abs) / (1.0 - abt);
        const double sd = std::sqrt((1.0 - abs) / (1.0 - abt) * beta);
        KeyedRng rng(cfg.seed, kStepNoiseKey, k);
        Tensor<T> next(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double x0 = (double(x[i]) - st * double(e[i])) / at;
          next[i] = T(c0 * x0 + ct * double(x[i]) + sd * rng.normal());
        }
        x = std::move(next);
        detail::check_finite(x, k, who);
      }
      break;
    }
  }
  return x;
}

template <class T>
Tensor<T> initial_noise(const Shape& shape, std::uint64_t seed) {
  KeyedRng rng(seed, kInitNoiseKey);
  return rng.normal_tensor<T>(shape);
}

/// Full sampling from a given x_T.
template <class T>
Tensor<T> sample_from(const GuidedModel<T>& model, Tensor<T> x_T, const SamplerConfig& cfg, const NoiseSchedule& sched) {
  const EpsFn<T> eps = guided(model, cfg.guidance.w);
  Tensor<T> x1 = integrate_to_one(eps, std::move(x_T), cfg, sched);
  Tensor<T> x0 = terminal_step(eps, x1, sched);
  detail::check_finite(x0, cfg.steps, "sampler");
  return x0;
}

/// Draws x_T from the seed and samples.
template <class T>
Tensor<T> sample(const GuidedModel<T>& model, const Shape& shape, const SamplerConfig& cfg, const NoiseSchedule& sched) {
  return sample_from(model, initial_noise<T>(shape, cfg.seed), cfg, sched);
}

/// Backbone wrapped as a guided model for a fixed condition batch. `override_fn`
/// carries LoRA deltas; `control` the ControlNet mask tokens.
inline GuidedModel<float> backbone_model(const BackboneConfig& cfg, const ModelParams<float>& params, Tensor<float> cond,
                                         std::size_t rows, std::size_t cols,
                                         std::optional<ControlInput<float>> control = std::nullopt,
                                         BoundParams<float>::Override override_fn = {}) {
  return [&cfg, &params, cond = std::move(cond), rows, cols, control = std::move(control),
          override_fn = std::move(override_fn)](const Tensor<float>& x, double t, bool conditional) {
    BackboneInput<float> in;
    in.latents = x;
    in.t.assign(x.dim(0), t);
    in.cond = cond;
    in.cond_rows = rows;
    in.cond_cols = cols;
    in.drop_cond.assign(x.dim(0), !conditional);
    in.control = control;
    return backbone_predict(cfg, params, in, override_fn);
  };
}

// ---------------------------------------------------------------------------
// Guidance sweep

struct SweepRow {
  double w = 0;
  double metric = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ascending w
  double argmin_w = 0;

  nlohmann::json to_json() const {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& r : rows) t.push_back({{"w", r.w}, {"metric", r.metric}});
    return {{"table", t}, {"argmin_w", argmin_w}};
  }
};

/// Lowest metric wins; ties go to the smaller w.
inline SweepResult sweep_from_table(std::vector<SweepRow> rows) {
  if (rows.empty()) throw ConfigError("guidance sweep needs a non-empty w list");
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.w < b.w; });
  SweepResult res;
  std::size_t best = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!(rows[i].w >= 0)) throw ConfigError("guidance scale must be non-negative");
    if (i > 0 && rows[i].w == rows[i - 1].w) throw ConfigError("duplicate w " + std::to_string(rows[i].w) + " in sweep");
    if (!std::isfinite(rows[i].metric)) throw NumericError("sweep: metric at w=" + std::to_string(rows[i].w) + " is not finite");
    if (rows[i].metric < rows[best].metric) best = i;
  }
  res.rows = std::move(rows);
  res.argmin_w = res.rows[best].w;
  return res;
}

/// `score(w)` generates the fixed sample budget for w and scores it against the
/// reference set. Errors are rethrown with w attached.
inline SweepResult guidance_sweep(const std::vector<double>& ws, const std::function<double(double)>& score) {
  if (ws.empty()) throw ConfigError("guidance sweep needs a non-empty w list");
  std::vector<SweepRow> rows;
  for (double w : ws) {
    try {
      rows.push_back({w, score(w)});
    } catch (const NumericError& e) {
      throw NumericError("w=" + std::to_string(w) + ": " + e.what());
    } catch (const DimensionError& e) {
      throw DimensionError("w=" + std::to_string(w) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("w=" + std::to_string(w) + ": " + e.what());
    } catch (const StageError& e) {
      throw StageError("w=" + std::to_string(w) + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError("w=" + std::to_string(w) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("w=" + std::to_string(w) + ": " + e.what());
    }
  }
  return sweep_from_table(std::move(rows));
}

/// Fixture format: {"table": [{"w": 1, "metric": 13.25}, ...]} or {"1": 13.25, ...}.
inline SweepResult sweep_from_json(const nlohmann::json& j) {
  std::vector<SweepRow> rows;
  if (j.contains("table")) {
    for (const auto& r : j.at("table")) rows.push_back({r.at("w").get<double>(), r.at("metric").get<double>()});
  } else {
    for (const auto& [k, v] : j.items()) rows.push_back({std::stod(k), v.get<double>()});
  }
  return sweep_from_table(std::move(rows));
}

}  // namespace tilediff
