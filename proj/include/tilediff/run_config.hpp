#pragma once

// RunConfig: one JSON document holding every knob a command reads. Commands
// echo the resolved document; feeding it back through --config reruns the
// command with identical outputs.

#include <string>

#include <json.hpp>

#include "tilediff/checkpoint.hpp"
#include "tilediff/condition_embedder.hpp"
#include "tilediff/diffusion.hpp"
#include "tilediff/flow_translator.hpp"
#include "tilediff/hash.hpp"
#include "tilediff/latent_codec.hpp"
#include "tilediff/progressive.hpp"
#include "tilediff/samplers.hpp"

namespace tilediff {

inline json to_json(const ScheduleConfig& c) {
  return {{"type", c.type}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}, {"steps", c.steps}};
}
inline ScheduleConfig schedule_config_from_json(const json& j) {
  ScheduleConfig c;
  c.type = j.value("type", c.type);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.steps = j.value("steps", c.steps);
  return c;
}

inline json to_json(const CodecConfig& c) { return {{"factor", c.factor}, {"seed", c.seed}}; }
inline CodecConfig codec_config_from_json(const json& j) {
  CodecConfig c;
  c.factor = j.value("factor", c.factor);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json to_json(const EmbedderConfig& c) { return {{"dim", c.dim}, {"window", c.window}, {"seed", c.seed}}; }
inline EmbedderConfig embedder_config_from_json(const json& j) {
  EmbedderConfig c;
  c.dim = j.value("dim", c.dim);
  c.window = j.value("window", c.window);
  c.seed = j.value("seed", c.seed);
  return c;
}

/// Sampler section; the seed is not stored here but derived from the run seed.
inline json to_json(const SamplerConfig& c) {
  return {{"kind", to_string(c.kind)}, {"steps", c.steps}, {"w", c.guidance.w}};
}
inline SamplerConfig sampler_config_from_json(const json& j) {
  SamplerConfig c;
  c.kind = parse_sampler_kind(j.value("kind", std::string(to_string(c.kind))));
  c.steps = j.value("steps", c.steps);
  c.guidance.w = j.value("w", c.guidance.w);
  return c;
}

inline json default_run_config() {
  TrainConfig tc;
  tc.lr = 1e-3;  // desk-scale rate; the library default stays at the published 2e-5
  SamplerConfig sc;
  sc.steps = 20;
  sc.guidance.w = 2.0;
  json stages = json::object();
  for (int s = 1; s <= 3; ++s) {
    const auto spec = StageSpec::toy(s);
    stages[std::to_string(s)] = {{"steps", spec.steps}, {"batch", spec.batch}};
  }
  return {
      {"seed", 0},
      {"schedule", to_json(ScheduleConfig{})},
      {"codec", to_json(CodecConfig{})},
      {"embedder", to_json(EmbedderConfig{})},
      {"backbone", to_json(BackboneConfig{})},
      {"train", to_json(tc)},
      {"stages", stages},
      {"sampler", to_json(sc)},
      {"data", {{"source", "toy"}, {"generator", "textures"}, {"n", 256}, {"resolution", 32}, {"seed", 1}, {"cache_dir", ""}}},
      {"control", {{"steps", 400}, {"batch", 16}, {"scales", {0.0, 1.0, 2.0}}, {"sweep_n", 4}, {"density_threshold", 0.45}}},
      {"lora", {{"rank", 4}, {"alpha", 4.0}, {"steps", 300}, {"batch", 16}}},
      {"flow", to_json(FlowConfig{})},
      {"flow_train", {{"lr", 1e-4}, {"weight_decay", 0.0}, {"batch", 32}, {"steps", 2000}}},
      {"eval", {{"eps_reg", 1e-6}, {"kid_degree", 3}, {"kid_subset", 50}, {"kid_subsets", 10}}},
  };
}

/// Per-purpose seed derived from the run seed, so one --seed pins every stream.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  return std::stoull(sha256_hex(std::to_string(seed) + "/" + purpose).substr(0, 15), nullptr, 16);
}

}  // namespace tilediff
