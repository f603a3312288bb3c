#pragma once

// Three-stage curriculum: latent crops paired with their condition-token block,
// the epsilon-prediction training loop, stage-to-stage weight transfer and
// variation sampling from reference images.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilediff/adapters.hpp"
#include "tilediff/backbone.hpp"
#include "tilediff/checkpoint.hpp"
#include "tilediff/condition_embedder.hpp"
#include "tilediff/diffusion.hpp"
#include "tilediff/latent_codec.hpp"
#include "tilediff/optim.hpp"
#include "tilediff/rng.hpp"
#include "tilediff/samplers.hpp"

namespace tilediff {

// ---------------------------------------------------------------------------
// Stages

/// Full-resolution condition grid is kGridSide x kGridSide tokens.
inline constexpr std::size_t kGridSide = 4;

struct StageSpec {
  int stage = 1;
  std::size_t steps = 1000;
  std::size_t batch = 32;

  std::size_t crops_per_side() const { return stage == 1 ? 4 : stage == 2 ? 2 : 1; }
  std::size_t crops_per_latent() const { return crops_per_side() * crops_per_side(); }
  std::size_t tokens_per_side() const { return kGridSide / crops_per_side(); }
  std::size_t tokens_per_crop() const { return tokens_per_side() * tokens_per_side(); }

  void validate() const {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    if (batch == 0) throw ConfigError("batch size must be positive");
  }

  /// Desk-scale defaults: 1000/500/500 steps at batch 32/16/8.
  static StageSpec toy(int stage) {
    StageSpec s;
    s.stage = stage;
    s.steps = stage == 1 ? 1000 : 500;
    s.batch = stage == 1 ? 32 : stage == 2 ? 16 : 8;
    s.validate();
    return s;
  }
};

inline nlohmann::json to_json(const StageSpec& s) {
  return {{"stage", s.stage},
          {"steps", s.steps},
          {"batch", s.batch},
          {"crops_per_latent", s.crops_per_latent()},
          {"tokens_per_crop", s.tokens_per_crop()}};
}

struct CropPair {
  Tensor<float> latent;  // [h, w, C]
  Tensor<float> tokens;  // [rows * cols, dim]
  std::size_t rows = 0, cols = 0;
  std::size_t i = 0, j = 0;  // crop position in the crop grid
};

/// Non-overlapping row-major crops; crop (i, j) gets the token block covering
/// exactly the same image region.
inline std::vector<CropPair> crop_latents(const LatentTensor& lat, const ConditionGrid& grid, const StageSpec& spec) {
  spec.validate();
  const std::size_t k = spec.crops_per_side();
  if (lat.rank() != 3) throw DimensionError("crop_latents: latent must be [H, W, C]");
  const std::size_t h = lat.dim(0), w = lat.dim(1), c = lat.dim(2);
  if (h % k || w % k) {
    throw DimensionError("crop_latents: latent " + shape_str(lat.shape()) + " not divisible into " + std::to_string(k) +
                         "x" + std::to_string(k) + " crops");
  }
  if (grid.rows % k || grid.cols % k) {
    throw DimensionError("crop_latents: " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                         " condition grid not divisible into " + std::to_string(k) + "x" + std::to_string(k) + " blocks");
  }
  if (h * grid.cols != w * grid.rows) throw DimensionError("crop_latents: latent and condition grid cover different shapes");
  const std::size_t ch = h / k, cw = w / k, tr = grid.rows / k, tc = grid.cols / k, d = grid.dim();
  std::vector<CropPair> out;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      CropPair p{Tensor<float>({ch, cw, c}), Tensor<float>({tr * tc, d}), tr, tc, i, j};
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x)
          std::copy_n(&lat.at(i * ch + y, j * cw + x, 0), c, &p.latent.at(y, x, 0));
      for (std::size_t a = 0; a < tr; ++a)
        for (std::size_t b = 0; b < tc; ++b) {
          const auto t = grid.token(i * tr + a, j * tc + b);
          std::copy(t.begin(), t.end(), p.tokens.data().begin() + (a * tc + b) * d);
        }
      out.push_back(std::move(p));
    }
  return out;
}

/// Inverse of crop_latents for the latent part.
inline LatentTensor stitch_crops(const std::vector<CropPair>& crops, std::size_t per_side) {
  if (crops.size() != per_side * per_side || crops.empty()) throw DimensionError("stitch_crops: wrong crop count");
  const std::size_t ch = crops[0].latent.dim(0), cw = crops[0].latent.dim(1), c = crops[0].latent.dim(2);
  LatentTensor lat({ch * per_side, cw * per_side, c});
  for (const auto& p : crops)
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) std::copy_n(&p.latent.at(y, x, 0), c, &lat.at(p.i * ch + y, p.j * cw + x, 0));
  return lat;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 2e-5;
  double weight_decay = 0.03;
  std::string optimizer = "adamw";
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t log_every = 10;

  AdamWConfig adamw() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }

  void validate() const {
    if (optimizer != "adamw") throw ConfigError("optimizer must be adamw");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(cond_dropout >= 0 && cond_dropout <= 1)) throw ConfigError("condition dropout must be in [0, 1]");
    if (log_every == 0) throw ConfigError("log_every must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},       {"weight_decay", c.weight_decay}, {"optimizer", c.optimizer}, {"cond_dropout", c.cond_dropout},
          {"seed", c.seed},   {"beta1", c.beta1},               {"beta2", c.beta2},         {"adam_eps", c.adam_eps},
          {"log_every", c.log_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

/// Per-dataset affine map bringing latents to zero mean, unit variance.
struct LatentNorm {
  double shift = 0.0;
  double scale = 1.0;

  static LatentNorm fit(const std::vector<LatentTensor>& lats) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& l : lats)
      for (float v : l.data()) s += v, ++n;
    if (n == 0) throw ConfigError("LatentNorm::fit: no latents");
    return {s / double(n), 1.0 / latent_std(lats)};
  }
  LatentTensor apply(const LatentTensor& l) const {
    LatentTensor o(l.shape());
    for (std::size_t i = 0; i < l.size(); ++i) o[i] = float((double(l[i]) - shift) * scale);
    return o;
  }
  LatentTensor invert(const LatentTensor& l) const {
    LatentTensor o(l.shape());
    for (std::size_t i = 0; i < l.size(); ++i) o[i] = float(double(l[i]) / scale + shift);
    return o;
  }
};

inline nlohmann::json to_json(const LatentNorm& n) { return {{"shift", n.shift}, {"scale", n.scale}}; }
inline LatentNorm latent_norm_from_json(const nlohmann::json& j) { return {j.at("shift"), j.at("scale")}; }

// ---------------------------------------------------------------------------
// Training loop

struct TrainExample {
  Tensor<float> latent;  // [h, w, C], normalized
  Tensor<float> cond;    // [rows * cols, dim]
  std::size_t rows = 0, cols = 0;
  std::optional<CellMask> mask;  // image-resolution mask for ControlNet training
};

struct LogRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double wallclock = 0;  // seconds since the loop started
};

inline nlohmann::json to_json(const LogRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"wallclock", r.wallclock}};
}

struct LoopOptions {
  std::size_t steps = 0;
  std::size_t batch = 8;
  std::function<bool(const std::string&)> trainable;  // base parameters to update
  LoraSet* lora = nullptr;                            // if set, its factors are trained
  double control_scale = 1.0;                         // used when examples carry masks
  std::size_t codec_factor = 2;
  std::function<void(const LogRecord&)> on_log;
  std::function<bool(std::size_t step, double loss)> keep_going;  // return false to stop early
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  std::vector<LogRecord> logs;
};

/// Mean of the trailing `window` losses at every step.
inline std::vector<double> smoothed(const std::vector<double>& x, std::size_t window) {
  std::vector<double> out(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i];
    if (i >= window) s -= x[i - window];
    out[i] = s / double(std::min(i + 1, window));
  }
  return out;
}

namespace detail {

// Stream keys for KeyedRng(seed, key, ...).
inline constexpr std::uint64_t kEpochKey = 0xe70c;
inline constexpr std::uint64_t kStepKey = 0x7157;

struct Batch {
  BackboneInput<float> input;
  Tensor<float> eps_tokens;
  std::vector<CellMask> masks;
};

inline Batch make_batch(const BackboneConfig& cfg, const std::vector<TrainExample>& data, const NoiseSchedule& sched,
                        const TrainConfig& tc, std::size_t step, std::size_t bsz) {
  const std::size_t n = data.size();
  std::vector<std::size_t> idx(bsz);
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm;
  for (std::size_t b = 0; b < bsz; ++b) {
    const std::size_t flat = step * bsz + b, epoch = flat / n;
    if (epoch != cached_epoch) {
      KeyedRng r(tc.seed, kEpochKey, epoch);
      perm = r.permutation(n);
      cached_epoch = epoch;
    }
    idx[b] = perm[flat % n];
  }
  const auto& first = data[idx[0]];
  const Shape ls = first.latent.shape();
  Tensor<float> x0({bsz, ls[0], ls[1], ls[2]});
  Tensor<float> cond({bsz, first.cond.dim(0), first.cond.dim(1)});
  Batch out;
  for (std::size_t b = 0; b < bsz; ++b) {
    const auto& ex = data[idx[b]];
    if (ex.latent.shape() != ls || ex.cond.shape() != first.cond.shape() || ex.rows != first.rows) {
      throw DimensionError("training examples in one run must share latent and condition shapes");
    }
    std::copy(ex.latent.data().begin(), ex.latent.data().end(), x0.data().begin() + b * ex.latent.size());
    std::copy(ex.cond.data().begin(), ex.cond.data().end(), cond.data().begin() + b * ex.cond.size());
    if (ex.mask) out.masks.push_back(*ex.mask);
  }
  KeyedRng rng(tc.seed, kStepKey, step);
  std::vector<std::size_t> t(bsz);
  std::vector<bool> drop(bsz);
  for (std::size_t b = 0; b < bsz; ++b) t[b] = std::size_t(rng.integer(1, std::int64_t(sched.steps())));
  for (std::size_t b = 0; b < bsz; ++b) drop[b] = rng.bernoulli(tc.cond_dropout);
  const Tensor<float> eps = rng.normal_tensor<float>(x0.shape());
  out.input.latents = add_noise_batch(x0, eps, t, sched);
  out.input.t.assign(t.begin(), t.end());
  out.input.cond = std::move(cond);
  out.input.cond_rows = first.rows;
  out.input.cond_cols = first.cols;
  out.input.drop_cond = std::move(drop);
  out.eps_tokens = patchify(eps, cfg.patch);
  return out;
}

}  // namespace detail

/// AdamW on epsilon-prediction MSE. Parameters outside `trainable` (and outside
/// the LoRA set, if any) are bound as constants and must end the run unchanged.
inline TrainResult train_loop(const BackboneConfig& cfg, ModelParams<float>& params, const NoiseSchedule& sched,
                              const std::vector<TrainExample>& data, const TrainConfig& tc, const LoopOptions& opt) {
  tc.validate();
  if (data.empty()) throw ConfigError("train_loop: empty dataset");
  if (opt.batch == 0) throw ConfigError("train_loop: batch must be positive");
  const AdamWConfig ac = tc.adamw();
  std::map<std::string, AdamState<float>> state;
  std::map<std::size_t, std::pair<AdamState<float>, AdamState<float>>> lora_state;
  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < opt.steps; ++step) {
    auto batch = detail::make_batch(cfg, data, sched, tc, step, opt.batch);
    if (!batch.masks.empty() && params.contains("control.mask_embed.weight")) {  // masks are ignored without a branch
      if (batch.masks.size() != opt.batch) throw ConfigError("train_loop: either all or no examples carry masks");
      const std::size_t h = batch.input.latents.dim(1), w = batch.input.latents.dim(2);
      Tensor<float> mt({opt.batch, (h / cfg.patch) * (w / cfg.patch), mask_token_dim(cfg, opt.codec_factor)});
      for (std::size_t b = 0; b < opt.batch; ++b) {
        const auto m = mask_tokens(batch.masks[b], cfg, opt.codec_factor);
        std::copy(m.data().begin(), m.data().end(), mt.data().begin() + b * m.size());
      }
      batch.input.control = ControlInput<float>{std::move(mt), opt.control_scale};
    }

    Tape<float> tape;
    std::optional<LoraBinding> lb;
    if (opt.lora) lb.emplace(*opt.lora, true);
    BoundParams<float> bound(tape, params, opt.trainable, lb ? lb->override_fn() : BoundParams<float>::Override{});
    const Var<float> pred = backbone_forward_tokens(cfg, bound, batch.input);
    const Var<float> loss = ad::mse(pred, tape.constant(batch.eps_tokens));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw NumericError("train_loop: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);

    for (const auto& [name, leaf] : bound.leaves()) {
      const bool train = opt.trainable && opt.trainable(name);
      if (!train) {
        if (tape.has_grad(leaf.id)) throw StageError("gradient reached frozen parameter " + name);
        continue;
      }
      adamw_step(params.at(name), tape.gradient(leaf), state[name], ac, name);
    }
    if (lb) {
      for (std::size_t i = 0; i < opt.lora->adapters.size(); ++i) {
        auto& ad = opt.lora->adapters[i];
        const auto [a, b] = lb->factors(i);
        auto& [sa, sb] = lora_state[i];
        const Tensor<float> ga = tape.gradient(a), gb = tape.gradient(b);
        adamw_step(ad.a, ga, sa, ac, "lora." + ad.target + ".A");
        adamw_step(ad.b, gb, sb, ac, "lora." + ad.target + ".B");
      }
    }

    res.losses.push_back(lv);
    if (step % tc.log_every == 0 || step + 1 == opt.steps) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      LogRecord r{step, lv, tc.lr, wall};
      res.logs.push_back(r);
      if (opt.on_log) opt.on_log(r);
    }
    if (opt.keep_going && !opt.keep_going(step, lv)) break;
  }
  return res;
}

/// Held-out epsilon loss with fixed noise draws (stream `seed`), no dropout.
inline double evaluate_loss(const BackboneConfig& cfg, const ModelParams<float>& params, const NoiseSchedule& sched,
                            const std::vector<TrainExample>& data, std::uint64_t seed, std::size_t batch,
                            std::size_t batches, BoundParams<float>::Override override_fn = {}) {
  TrainConfig tc;
  tc.seed = seed;
  tc.cond_dropout = 0;
  double total = 0;
  for (std::size_t k = 0; k < batches; ++k) {
    auto b = detail::make_batch(cfg, data, sched, tc, k, batch);
    const auto& ls = b.input.latents.shape();
    const Tensor<float> pred = backbone_predict(cfg, params, b.input, override_fn);
    const Tensor<float> eps = unpatchify(b.eps_tokens, cfg.patch, ls[1], ls[2], ls[3]);
    double s = 0;
    for (std::size_t i = 0; i < eps.size(); ++i) s += (double(pred[i]) - eps[i]) * (double(pred[i]) - eps[i]);
    total += s / double(eps.size());
  }
  return total / double(batches);
}

// ---------------------------------------------------------------------------
// Stages and checkpoints

/// Copies every parameter of `from` into `to` by name; returns the number of scalars copied.
inline std::size_t transfer_weights(const ModelParams<float>& from, ModelParams<float>& to) {
  std::size_t n = 0;
  for (const auto& [name, t] : from.tensors) {
    if (!to.contains(name)) throw StageError("weight transfer: parameter " + name + " missing in the target model");
    auto& dst = to.at(name);
    if (dst.shape() != t.shape()) {
      throw StageError("weight transfer: " + name + " has shape " + shape_str(t.shape()) + " but target expects " +
                       shape_str(dst.shape()));
    }
    dst = t;
    n += t.size();
  }
  return n;
}

struct StageContext {
  BackboneConfig backbone;
  TrainConfig train;
  LatentNorm norm;
  CodecConfig codec;
  EmbedderConfig embedder;
  ScheduleConfig schedule;
};

inline nlohmann::json backbone_header(const StageContext& ctx, const StageSpec& spec, std::size_t step) {
  return {{"kind", "backbone"},
          {"stage", spec.stage},
          {"step", step},
          {"stage_spec", to_json(spec)},
          {"backbone", to_json(ctx.backbone)},
          {"train", to_json(ctx.train)},
          {"latent_norm", to_json(ctx.norm)},
          {"codec", {{"factor", ctx.codec.factor}, {"seed", ctx.codec.seed}}},
          {"embedder", {{"dim", ctx.embedder.dim}, {"window", ctx.embedder.window}, {"seed", ctx.embedder.seed}}},
          {"schedule",
           {{"type", ctx.schedule.type},
            {"beta_min", ctx.schedule.beta_min},
            {"beta_max", ctx.schedule.beta_max},
            {"steps", ctx.schedule.steps}}}};
}

inline int checkpoint_stage(const Checkpoint& ck) {
  if (ck.header.value("kind", "") != "backbone") throw StageError("not a backbone checkpoint");
  return ck.header.at("stage").get<int>();
}

inline LatentNorm checkpoint_norm(const Checkpoint& ck) { return latent_norm_from_json(ck.header.at("latent_norm")); }
inline BackboneConfig checkpoint_backbone(const Checkpoint& ck) { return backbone_config_from_json(ck.header.at("backbone")); }

/// Stage n > 1 needs a stage n-1 checkpoint built with the same backbone config.
inline void check_stage_prerequisite(const StageSpec& spec, const std::optional<Checkpoint>& prev,
                                     const BackboneConfig& cfg) {
  if (spec.stage == 1) return;
  if (!prev) {
    throw StageError("stage prerequisite: stage " + std::to_string(spec.stage) + " needs a stage " +
                     std::to_string(spec.stage - 1) + " checkpoint");
  }
  const int ps = checkpoint_stage(*prev);
  if (ps != spec.stage - 1) {
    throw StageError("stage prerequisite: stage " + std::to_string(spec.stage) + " needs a stage " +
                     std::to_string(spec.stage - 1) + " checkpoint, got stage " + std::to_string(ps));
  }
  if (prev->header.at("backbone") != to_json(cfg)) {
    throw StageError("config mismatch: checkpoint backbone " + prev->header.at("backbone").dump() + " vs requested " +
                     to_json(cfg).dump());
  }
}

/// Stage examples: every latent cropped per the spec, masks cropped alongside.
inline std::vector<TrainExample> stage_examples(const std::vector<LatentTensor>& latents,
                                                const std::vector<ConditionGrid>& grids, const StageSpec& spec,
                                                const std::vector<CellMask>& masks = {}, std::size_t codec_factor = 2) {
  if (latents.size() != grids.size()) throw DimensionError("stage_examples: one condition grid per latent");
  if (!masks.empty() && masks.size() != latents.size()) throw DimensionError("stage_examples: one mask per latent");
  std::vector<TrainExample> out;
  for (std::size_t n = 0; n < latents.size(); ++n) {
    for (auto& p : crop_latents(latents[n], grids[n], spec)) {
      TrainExample ex{std::move(p.latent), std::move(p.tokens), p.rows, p.cols, std::nullopt};
      if (!masks.empty()) {
        const std::size_t mh = ex.latent.dim(0) * codec_factor, mw = ex.latent.dim(1) * codec_factor;
        CellMask m({mh, mw});
        for (std::size_t y = 0; y < mh; ++y)
          for (std::size_t x = 0; x < mw; ++x) m.at(y, x) = masks[n].at(p.i * mh + y, p.j * mw + x);
        ex.mask = std::move(m);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

struct StageRun {
  Checkpoint checkpoint;
  TrainResult result;
  std::size_t transferred = 0;  // scalars copied from the previous stage
};

/// Trains one stage. Writes checkpoints/stageN_stepK.ckpt and logs/stageN.jsonl
/// under `run_dir` when it is non-empty.
inline StageRun train_stage(const StageContext& ctx, const std::optional<Checkpoint>& prev,
                            const std::vector<TrainExample>& data, const StageSpec& spec, std::uint64_t init_seed,
                            const std::filesystem::path& run_dir = {},
                            std::function<bool(std::size_t, double)> keep_going = {}) {
  spec.validate();
  check_stage_prerequisite(spec, prev, ctx.backbone);
  StageRun run;
  ModelParams<float> params = init_backbone<float>(ctx.backbone, init_seed);
  if (prev) run.transferred = transfer_weights(prev->params, params);

  std::ofstream log;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir / "logs");
    log.open(run_dir / "logs" / ("stage" + std::to_string(spec.stage) + ".jsonl"), std::ios::trunc);
  }
  LoopOptions opt;
  opt.steps = spec.steps;
  opt.batch = spec.batch;
  opt.trainable = [](const std::string& n) { return !is_control_param(n); };
  opt.keep_going = std::move(keep_going);
  if (log) opt.on_log = [&log](const LogRecord& r) { log << to_json(r).dump() << "\n"; };
  const NoiseSchedule sched(ctx.schedule);
  run.result = train_loop(ctx.backbone, params, sched, data, ctx.train, opt);

  run.checkpoint.header = backbone_header(ctx, spec, run.result.losses.size());
  run.checkpoint.header["transferred_scalars"] = run.transferred;
  run.checkpoint.params = std::move(params);
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir / "checkpoints");
    save_checkpoint((run_dir / "checkpoints" /
                     ("stage" + std::to_string(spec.stage) + "_step" + std::to_string(run.result.losses.size()) + ".ckpt"))
                        .string(),
                    run.checkpoint);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Variations

/// Sampler seed for variation j of reference i.
inline std::uint64_t variation_seed(std::uint64_t seed, std::size_t i, std::size_t j) {
  KeyedRng r(seed, 0x7a41, i, j);
  return r.engine()();
}

/// Image side a checkpoint generates: tokens per side x pixels per token.
inline std::size_t stage_image_side(const BackboneConfig& cfg, int stage, std::size_t codec_factor) {
  StageSpec s;
  s.stage = stage;
  return s.tokens_per_side() * cfg.cond_token_span * cfg.patch * codec_factor;
}

struct GenerationModel {
  BackboneConfig cfg;
  const ModelParams<float>* params = nullptr;
  LatentNorm norm;
  int stage = 1;
  BoundParams<float>::Override override_fn;  // LoRA, optional
};

inline GenerationModel generation_model(const Checkpoint& ck, BoundParams<float>::Override override_fn = {}) {
  return {checkpoint_backbone(ck), &ck.params, checkpoint_norm(ck), checkpoint_stage(ck), std::move(override_fn)};
}

struct VariationSet {
  std::size_t ref_index = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<ImageTensor> images;
};

/// Samples `n` images for every condition grid; decoded and clamped to [0, 1].
inline std::vector<VariationSet> variations_from_grids(const std::vector<ConditionGrid>& grids, const GenerationModel& m,
                                                       std::size_t n, const SamplerConfig& sc, const LatentCodec& codec,
                                                       const NoiseSchedule& sched) {
  const std::size_t side = stage_image_side(m.cfg, m.stage, codec.config().factor) / codec.config().factor;
  std::vector<VariationSet> out;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& g = grids[i];
    VariationSet vs{i, {}, {}};
    Tensor<float> cond = g.tokens.reshaped({1, g.count(), g.dim()});
    const auto model = backbone_model(m.cfg, *m.params, cond, g.rows, g.cols, std::nullopt, m.override_fn);
    for (std::size_t j = 0; j < n; ++j) {
      SamplerConfig c = sc;
      c.seed = variation_seed(sc.seed, i, j);
      const Tensor<float> lat = sample(model, {1, side, side, m.cfg.latent_channels}, c, sched);
      ImageTensor img = codec.decode(m.norm.invert(lat.reshaped({side, side, m.cfg.latent_channels})));
      for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
      vs.seeds.push_back(c.seed);
      vs.images.push_back(std::move(img));
    }
    out.push_back(std::move(vs));
  }
  return out;
}

inline std::vector<VariationSet> generate_variations(const std::vector<ImageTensor>& refs, const GenerationModel& m,
                                                     std::size_t n, const SamplerConfig& sc, const LatentCodec& codec,
                                                     const ConditionEmbedder& embedder, const NoiseSchedule& sched) {
  const std::size_t side = stage_image_side(m.cfg, m.stage, codec.config().factor);
  StageSpec s;
  s.stage = m.stage;
  std::vector<ConditionGrid> grids;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].rank() != 3 || refs[i].dim(0) != side || refs[i].dim(1) != side) {
      throw StageError("reference " + std::to_string(i) + " is " + shape_str(refs[i].shape()) + " but a stage " +
                       std::to_string(m.stage) + " checkpoint generates " + std::to_string(side) + "x" +
                       std::to_string(side) + " images");
    }
    grids.push_back(embedder.embed_grid(refs[i], s.tokens_per_side(), s.tokens_per_side()));
  }
  return variations_from_grids(grids, m, n, sc, codec, sched);
}

/// Manifest lines linking each synthetic image to its reference.
inline std::string variations_manifest(const std::vector<VariationSet>& sets, const std::vector<std::string>& ref_names,
                                       const std::string& prefix = "var") {
  std::string s;
  for (const auto& vs : sets)
    for (std::size_t j = 0; j < vs.images.size(); ++j) {
      const std::string file = prefix + "_" + std::to_string(vs.ref_index) + "_" + std::to_string(j) + ".png";
      s += nlohmann::json{{"file", file},
                          {"reference", vs.ref_index < ref_names.size() ? ref_names[vs.ref_index] : std::to_string(vs.ref_index)},
                          {"ref_index", vs.ref_index},
                          {"seed", vs.seeds[j]}}
               .dump() +
           "\n";
    }
  return s;
}

}  // namespace tilediff
