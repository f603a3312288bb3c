#pragma once

// Rectified flow between condition-embedding domains: a residual MLP predicts the
// straight-line displacement x1 - x0 at x_t = (1 - t) x0 + t x1, and Euler steps
// from t = 0 to 1 carry a source embedding across.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilediff/autodiff.hpp"
#include "tilediff/backbone.hpp"
#include "tilediff/checkpoint.hpp"
#include "tilediff/condition_embedder.hpp"
#include "tilediff/ops.hpp"
#include "tilediff/optim.hpp"
#include "tilediff/params.hpp"
#include "tilediff/progressive.hpp"
#include "tilediff/rng.hpp"

namespace tilediff {

struct FlowConfig {
  std::size_t dim = 32;
  std::size_t width = 128;
  std::size_t blocks = 4;
  std::size_t time_features = 16;  // cos/sin pairs, so half as many frequencies

  void validate() const {
    if (dim == 0 || width == 0 || blocks == 0) throw ConfigError("flow net dims must be positive");
    if (time_features == 0 || time_features % 2) throw ConfigError("flow time_features must be even and positive");
  }
};

inline nlohmann::json to_json(const FlowConfig& c) {
  return {{"dim", c.dim}, {"width", c.width}, {"blocks", c.blocks}, {"time_features", c.time_features}};
}

inline FlowConfig flow_config_from_json(const nlohmann::json& j) {
  FlowConfig c;
  c.dim = j.value("dim", c.dim);
  c.width = j.value("width", c.width);
  c.blocks = j.value("blocks", c.blocks);
  c.time_features = j.value("time_features", c.time_features);
  c.validate();
  return c;
}

struct FlowTrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::size_t batch = 32;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const FlowTrainConfig& c) {
  return {{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"batch", c.batch}, {"steps", c.steps}, {"seed", c.seed}};
}

/// VelocityNet parameters. The output layer starts at zero, so a fresh net is the identity flow.
inline ModelParams<float> init_flow_net(const FlowConfig& c, std::uint64_t seed) {
  c.validate();
  ModelParams<float> p;
  KeyedRng rng(seed, 0xf10);
  detail::add_linear(p, rng, "in", c.width, c.dim + c.time_features);
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string b = "res." + std::to_string(i);
    p.add(b + ".norm.gamma", Tensor<float>({c.width}, 1.0f));
    p.add(b + ".norm.beta", Tensor<float>({c.width}));
    detail::add_linear(p, rng, b + ".fc1", c.width, c.width);
    detail::add_linear(p, rng, b + ".fc2", c.width, c.width);
  }
  detail::add_linear(p, rng, "out", c.dim, c.width, /*zero=*/true);
  return p;
}

/// A net that returns the constant vector c everywhere.
inline ModelParams<float> constant_flow_net(const FlowConfig& cfg, std::span<const float> c) {
  if (c.size() != cfg.dim) throw DimensionError("constant_flow_net: vector has wrong dimension");
  ModelParams<float> p = init_flow_net(cfg, 0);
  std::copy(c.begin(), c.end(), p.at("out.bias").data().begin());
  return p;
}

/// [cos(w_k t), sin(w_k t)] with w_k log-spaced in [1, 100].
inline Tensor<float> flow_time_features(std::span<const double> t, std::size_t nf) {
  const std::size_t half = nf / 2;
  Tensor<float> f({t.size(), nf});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t k = 0; k < half; ++k) {
      const double w = half > 1 ? std::exp(double(k) * std::log(100.0) / double(half - 1)) : 1.0;
      f[b * nf + k] = float(std::cos(w * t[b]));
      f[b * nf + half + k] = float(std::sin(w * t[b]));
    }
  return f;
}

/// v(x, t) for x [N, dim].
inline Var<float> velocity(const FlowConfig& c, const BoundParams<float>& p, Var<float> x, std::span<const double> t) {
  if (x.shape().size() != 2 || x.shape()[1] != c.dim) {
    throw DimensionError("velocity: input " + shape_str(x.shape()) + " does not match flow dim " + std::to_string(c.dim));
  }
  if (t.size() != x.shape()[0]) throw DimensionError("velocity: need one time per row");
  Var<float> h = ad::concat_last(x, p.tape().constant(flow_time_features(t, c.time_features)));
  h = detail::lin(p, h, "in");
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string b = "res." + std::to_string(i);
    Var<float> r = ad::layer_norm(h, p[b + ".norm.gamma"], p[b + ".norm.beta"], 1e-5);
    r = detail::lin(p, ad::silu(detail::lin(p, r, b + ".fc1")), b + ".fc2");
    h = ad::add(h, r);
  }
  return detail::lin(p, ad::silu(h), "out");
}

inline Tensor<float> velocity_eval(const FlowConfig& c, const ModelParams<float>& params, const Tensor<float>& x,
                                   std::span<const double> t) {
  Tape<float> tape;
  BoundParams<float> p(tape, params);
  return velocity(c, p, tape.constant(x), t).value();
}

/// Mean over the batch of ||(x1 - x0) - v(x_t, t)||^2.
inline double flow_loss(const FlowConfig& c, const ModelParams<float>& params, const Tensor<float>& x0,
                        const Tensor<float>& x1, std::span<const double> t) {
  if (x0.shape() != x1.shape()) throw DimensionError("flow_loss: source " + shape_str(x0.shape()) + " vs target " + shape_str(x1.shape()));
  if (x0.rank() != 2 || x0.dim(1) != c.dim) throw DimensionError("flow_loss: embeddings must be [N, " + std::to_string(c.dim) + "]");
  const std::size_t n = x0.dim(0), d = c.dim;
  Tensor<float> xt(x0.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < d; ++k) xt[b * d + k] = float((1 - t[b]) * x0[b * d + k] + t[b] * x1[b * d + k]);
  const Tensor<float> v = velocity_eval(c, params, xt, t);
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = (double(x1[i]) - x0[i]) - v[i];
    s += r * r;
  }
  return s / double(n);
}

/// Explicit Euler from t = 0 to 1. Rows of x0 are independent embeddings.
inline Tensor<float> translate(const FlowConfig& c, const ModelParams<float>& params, const Tensor<float>& x0,
                               std::size_t steps = 50) {
  if (steps == 0) throw ConfigError("translate: steps must be >= 1");
  if (x0.rank() != 2 || x0.dim(1) != c.dim) {
    throw DimensionError("translate: embeddings " + shape_str(x0.shape()) + " do not match flow dim " + std::to_string(c.dim));
  }
  Tensor<float> x = x0;
  const double dt = 1.0 / double(steps);
  std::vector<double> t(x.dim(0));
  for (std::size_t k = 0; k < steps; ++k) {
    std::fill(t.begin(), t.end(), double(k) * dt);
    const Tensor<float> v = velocity_eval(c, params, x, t);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = float(double(x[i]) + dt * double(v[i]));
      if (!std::isfinite(x[i])) throw NumericError("translate: non-finite state at step " + std::to_string(k));
    }
  }
  return x;
}

/// AdamW on the rectified-flow objective over paired rows of x0/x1. Returns per-step losses.
inline std::vector<double> train_flow(const FlowConfig& c, ModelParams<float>& params, const Tensor<float>& x0,
                                      const Tensor<float>& x1, const FlowTrainConfig& tc) {
  if (x0.shape() != x1.shape() || x0.rank() != 2 || x0.dim(1) != c.dim) {
    throw DimensionError("train_flow: pairs must be two [N, " + std::to_string(c.dim) + "] tensors");
  }
  if (tc.batch == 0) throw ConfigError("train_flow: batch must be positive");
  const std::size_t n = x0.dim(0), d = c.dim;
  AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  std::map<std::string, AdamState<float>> state;
  std::vector<double> losses;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    KeyedRng rng(tc.seed, 0xf1a, step);
    Tensor<float> xt({tc.batch, d}), target({tc.batch, d});
    std::vector<double> t(tc.batch);
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const std::size_t i = std::size_t(rng.integer(0, std::int64_t(n - 1)));
      t[b] = rng.uniform();
      for (std::size_t k = 0; k < d; ++k) {
        xt[b * d + k] = float((1 - t[b]) * x0[i * d + k] + t[b] * x1[i * d + k]);
        target[b * d + k] = x1[i * d + k] - x0[i * d + k];
      }
    }
    Tape<float> tape;
    BoundParams<float> p(tape, params, [](const std::string&) { return true; });
    const Var<float> v = velocity(c, p, tape.constant(xt), t);
    const Var<float> loss = ad::scale(ad::mse(v, tape.constant(target)), double(d));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw NumericError("train_flow: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    for (const auto& [name, leaf] : p.leaves()) adamw_step(params.at(name), tape.gradient(leaf), state[name], ac, name);
    losses.push_back(lv);
  }
  return losses;
}

inline Checkpoint flow_checkpoint(const FlowConfig& c, const FlowTrainConfig& tc, ModelParams<float> params) {
  return {{{"kind", "flow"}, {"flow", to_json(c)}, {"train", to_json(tc)}}, std::move(params)};
}

inline FlowConfig checkpoint_flow_config(const Checkpoint& ck) {
  if (ck.header.value("kind", "") != "flow") throw IoError("not a flow checkpoint");
  return flow_config_from_json(ck.header.at("flow"));
}

/// Per tile: embed -> translate every token -> conditional sampling -> decode.
/// Variation seeds follow generate_variations, so an identity flow reproduces it.
inline std::vector<VariationSet> stain_translate_pipeline(const std::vector<ImageTensor>& sources, const FlowConfig& fc,
                                                          const ModelParams<float>& flow, const GenerationModel& m,
                                                          std::size_t n, const SamplerConfig& sc,
                                                          const LatentCodec& codec, const ConditionEmbedder& embedder,
                                                          const NoiseSchedule& sched, std::size_t flow_steps = 50) {
  if (fc.dim != embedder.dim()) {
    throw ConfigError("flow dim " + std::to_string(fc.dim) + " does not match embedding dim " + std::to_string(embedder.dim()));
  }
  const std::size_t side = stage_image_side(m.cfg, m.stage, codec.config().factor);
  StageSpec s;
  s.stage = m.stage;
  std::vector<ConditionGrid> grids;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    try {
      if (sources[i].rank() != 3 || sources[i].dim(0) != side || sources[i].dim(1) != side) {
        throw StageError("source is " + shape_str(sources[i].shape()) + ", model generates " + std::to_string(side) + "px tiles");
      }
      ConditionGrid g = embedder.embed_grid(sources[i], s.tokens_per_side(), s.tokens_per_side());
      g.tokens = translate(fc, flow, g.tokens, flow_steps);
      grids.push_back(std::move(g));
    } catch (const StageError& e) {
      throw StageError("tile " + std::to_string(i) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("tile " + std::to_string(i) + ": " + e.what());
    } catch (const DimensionError& e) {
      throw DimensionError("tile " + std::to_string(i) + ": " + e.what());
    }
  }
  return variations_from_grids(grids, m, n, sc, codec, sched);
}

}  // namespace tilediff
