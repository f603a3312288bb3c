#pragma once

// Adapter training on a frozen base: ControlNet branch training, the control
// scale sweep, and LoRA fine-tuning.

#include <string>
#include <vector>

#include "tilediff/adapters.hpp"
#include "tilediff/checkpoint.hpp"
#include "tilediff/data_ingest.hpp"
#include "tilediff/eval.hpp"
#include "tilediff/progressive.hpp"
#include "tilediff/samplers.hpp"

namespace tilediff {

// ---------------------------------------------------------------------------
// ControlNet

/// Trains only the "control.*" parameters; `params` must already carry the branch
/// and every example a mask.
inline TrainResult train_controlnet(const BackboneConfig& cfg, ModelParams<float>& params, const NoiseSchedule& sched,
                                    const std::vector<TrainExample>& data, const TrainConfig& tc, std::size_t steps,
                                    std::size_t batch, std::size_t codec_factor = 2,
                                    std::function<void(const LogRecord&)> on_log = {}) {
  if (!params.contains("control.zero.0.weight")) throw StageError("train_controlnet: no control branch attached");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!data[i].mask) throw ConfigError("train_controlnet: example " + std::to_string(i) + " has no mask");
  LoopOptions opt;
  opt.steps = steps;
  opt.batch = batch;
  opt.trainable = is_control_param;
  opt.control_scale = 1.0;
  opt.codec_factor = codec_factor;
  opt.on_log = std::move(on_log);
  return train_loop(cfg, params, sched, data, tc, opt);
}

/// Standalone adapter file: only the control.* tensors, tied to the base by hash.
inline Checkpoint control_to_checkpoint(const ModelParams<float>& params, const std::string& base_hash,
                                        const BackboneConfig& cfg, std::size_t codec_factor) {
  Checkpoint ck;
  for (const auto& [name, t] : params.tensors)
    if (is_control_param(name)) ck.params.add(name, t);
  if (ck.params.tensors.empty()) throw StageError("no control branch to save");
  ck.header = {{"kind", "controlnet"}, {"base_hash", base_hash}, {"backbone", to_json(cfg)}, {"codec_factor", codec_factor}};
  return ck;
}

/// Base weights plus the adapter's control.* tensors; the base must match the recorded hash.
inline ModelParams<float> attach_control_checkpoint(const ModelParams<float>& base, const Checkpoint& adapter) {
  if (adapter.header.value("kind", "") != "controlnet") throw IoError("not a ControlNet adapter file");
  const auto want = adapter.header.at("base_hash").get<std::string>(), have = content_hash(base);
  if (want != have) {
    throw StageError("ControlNet adapter was trained on base " + want.substr(0, 12) + " but the loaded base is " +
                     have.substr(0, 12));
  }
  ModelParams<float> out = base;
  for (const auto& [name, t] : adapter.params.tensors) out.add(name, t);
  return out;
}

struct ControlSweepRow {
  double scale = 0;
  ImageTensor image;
  CellMask predicted;   // thresholded density proxy of `image`
  double agreement = 0;  // IoU(predicted, mask)
};

/// One sample per control scale, all from the same initial noise.
inline std::vector<ControlSweepRow> control_guidance_sweep(const GenerationModel& m, const ConditionGrid& cond,
                                                           const CellMask& mask, const std::vector<double>& scales,
                                                           const SamplerConfig& sc, const LatentCodec& codec,
                                                           const NoiseSchedule& sched, double density_threshold = 0.45) {
  if (scales.empty()) throw ConfigError("control_guidance_sweep: empty scale list");
  const std::size_t f = codec.config().factor;
  const std::size_t side = stage_image_side(m.cfg, m.stage, f) / f;
  if (mask.rank() != 2 || mask.dim(0) != side * f || mask.dim(1) != side * f) {
    throw DimensionError("control_guidance_sweep: mask " + shape_str(mask.shape()) + " does not match a " +
                         std::to_string(side * f) + "px image");
  }
  const Tensor<float> c = cond.tokens.reshaped({1, cond.count(), cond.dim()});
  const Tensor<float> mt = mask_tokens(mask, m.cfg, f);
  const Tensor<float> xT = initial_noise<float>({1, side, side, m.cfg.latent_channels}, sc.seed);
  std::vector<ControlSweepRow> rows;
  for (double s : scales) {
    const auto model = backbone_model(m.cfg, *m.params, c, cond.rows, cond.cols,
                                      ControlInput<float>{mt.reshaped({1, mt.dim(0), mt.dim(1)}), s}, m.override_fn);
    const Tensor<float> lat = sample_from(model, xT, sc, sched);
    ControlSweepRow r;
    r.scale = s;
    r.image = codec.decode(m.norm.invert(lat.reshaped({side, side, m.cfg.latent_channels})));
    for (auto& v : r.image.data()) v = std::clamp(v, 0.0f, 1.0f);
    r.predicted = density_mask(r.image, density_threshold);
    r.agreement = dice_iou(r.predicted, mask).iou;
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// LoRA

struct LoraRun {
  LoraSet set;
  TrainResult result;
  std::string base_hash_before, base_hash_after;
};

/// Trains LoRA factors on `data` with every base parameter frozen. A changed
/// base checksum is a hard failure.
inline LoraRun lora_finetune(const BackboneConfig& cfg, ModelParams<float>& base, const NoiseSchedule& sched,
                             const std::vector<TrainExample>& data, const TrainConfig& tc, std::size_t steps,
                             std::size_t batch, std::size_t rank = 4, double alpha = 4, std::uint64_t seed = 0,
                             std::vector<std::string> targets = {}, std::function<void(const LogRecord&)> on_log = {}) {
  if (targets.empty()) targets = default_lora_targets(cfg);
  LoraRun run;
  run.base_hash_before = content_hash(base);
  run.set = init_lora(base, targets, rank, alpha, seed);
  LoopOptions opt;
  opt.steps = steps;
  opt.batch = batch;
  opt.trainable = [](const std::string&) { return false; };
  opt.lora = &run.set;
  opt.on_log = std::move(on_log);
  run.result = train_loop(cfg, base, sched, data, tc, opt);
  run.base_hash_after = content_hash(base);
  if (run.base_hash_after != run.base_hash_before) throw StageError("lora_finetune: frozen base parameters changed");
  return run;
}

}  // namespace tilediff
