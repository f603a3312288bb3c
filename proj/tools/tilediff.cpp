// tilediff: command-line entry point. Every command resolves a RunConfig, echoes
// it to stdout and to <run-dir>/config.json, then writes its artifacts under
// the run directory. Rerunning with --config <echo> reproduces the outputs.

#include <CLI11.hpp>

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "tilediff/data_ingest.hpp"
#include "tilediff/eval.hpp"
#include "tilediff/finetune.hpp"
#include "tilediff/flow_translator.hpp"
#include "tilediff/run_config.hpp"

using namespace tilediff;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kStage = 2, kConfig = 3, kDimension = 4, kNumeric = 5, kIo = 6, kUsage = 64 };

int report_error(const std::string& family, const std::string& message, int code) {
  std::cerr << json{{"error", {{"family", family}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
  return code;
}

// ---------------------------------------------------------------------------
// Command arguments. Each one lands in config["command"]["args"], so the echo
// carries everything needed to rerun.

struct Arg {
  std::string name;
  json def;
  std::string raw;
  bool flag = false;
  CLI::Option* opt = nullptr;
};

class Command {
 public:
  Command(CLI::App& app, std::string name, std::string help) : name_(std::move(name)) {
    sub_ = app.add_subcommand(name_, std::move(help));
  }
  const std::string& name() const { return name_; }
  CLI::App* app() const { return sub_; }

  void option(const std::string& name, json def, const std::string& help) {
    auto& a = args_.emplace_back(Arg{name, std::move(def), "", false, nullptr});
    a.opt = sub_->add_option("--" + name, a.raw, help + " (default " + a.def.dump() + ")");
  }
  void flag(const std::string& name, const std::string& help) {
    auto& a = args_.emplace_back(Arg{name, false, "", true, nullptr});
    a.opt = sub_->add_flag("--" + name, help);
  }
  void positional(const std::string& name, json def, const std::string& help) {
    auto& a = args_.emplace_back(Arg{name, std::move(def), "", false, nullptr});
    a.opt = sub_->add_option(name, a.raw, help);
  }

  /// Command line beats the config file, which beats the default.
  json resolve(const json& from_config) const {
    json out = json::object();
    for (const auto& a : args_) {
      if (a.opt->count() > 0) {
        out[a.name] = a.flag ? json(true) : parse(a);
      } else if (from_config.contains(a.name)) {
        out[a.name] = from_config.at(a.name);
      } else {
        out[a.name] = a.def;
      }
    }
    return out;
  }

 private:
  static json parse(const Arg& a) {
    try {
      if (a.def.is_number_unsigned() || a.def.is_number_integer()) return std::stoull(a.raw);
      if (a.def.is_number_float()) return std::stod(a.raw);
      if (a.def.is_array()) {
        json arr = json::array();
        std::stringstream ss(a.raw);
        std::string item;
        while (std::getline(ss, item, ','))
          if (!item.empty()) arr.push_back(std::stod(item));
        return arr;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("--" + a.name + ": cannot parse '" + a.raw + "'");
    }
    return a.raw;
  }

  std::string name_;
  CLI::App* sub_;
  std::deque<Arg> args_;
};

// ---------------------------------------------------------------------------
// Input hashing: a run is pinned by its config plus the content of its inputs.

std::string hash_input(const fs::path& p) {
  if (fs::is_regular_file(p)) return sha256_file(p.string());
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& f : files) h.update(fs::relative(f, p).generic_string()).update("\n").update(sha256_file(f.string()));
    return h.hex();
  }
  throw IoError("input '" + p.string() + "' does not exist");
}

bool is_path_input(const std::string& v) { return !v.empty() && v != "toy" && v != "identity"; }

// ---------------------------------------------------------------------------
// Shared helpers

struct Run {
  json cfg;
  json args;
  fs::path dir;

  std::uint64_t seed(const std::string& purpose) const { return derive_seed(cfg.at("seed").get<std::uint64_t>(), purpose); }
  std::string str(const char* k) const { return args.at(k).get<std::string>(); }
  std::size_t num(const char* k) const { return args.at(k).get<std::size_t>(); }
  double real(const char* k) const { return args.at(k).get<double>(); }
  fs::path out(const fs::path& rel) const {
    const fs::path p = dir / rel;
    fs::create_directories(p.parent_path());
    return p;
  }
  void write_json(const fs::path& rel, const json& j) const {
    std::ofstream o(out(rel), std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("cannot write " + (dir / rel).string());
    o << j.dump(2) << "\n";
  }
  void write_text(const fs::path& rel, const std::string& s) const {
    std::ofstream o(out(rel), std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("cannot write " + (dir / rel).string());
    o << s;
  }
  void png(const fs::path& rel, const Tensor<float>& img) const { write_png(out(rel).string(), img); }
};

std::vector<ImageTensor> load_pngs(const fs::path& dir, std::vector<std::string>* names = nullptr) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .png files in '" + dir.string() + "'");
  std::vector<ImageTensor> out;
  for (const auto& f : files) {
    out.push_back(read_png(f.string()));
    if (names) names->push_back(f.filename().string());
  }
  return out;
}

Checkpoint load_backbone(const Run& r, const char* key = "checkpoint") {
  const auto path = r.str(key);
  if (path.empty()) throw ConfigError("--" + std::string(key) + " is required");
  auto ck = load_checkpoint(path);
  checkpoint_stage(ck);
  return ck;
}

// The checkpoint's own codec/embedder/schedule, so generation matches training.
LatentCodec ck_codec(const Checkpoint& ck) { return LatentCodec(codec_config_from_json(ck.header.at("codec"))); }
ConditionEmbedder ck_embedder(const Checkpoint& ck) { return ConditionEmbedder(embedder_config_from_json(ck.header.at("embedder"))); }
NoiseSchedule ck_schedule(const Checkpoint& ck) { return NoiseSchedule(schedule_config_from_json(ck.header.at("schedule"))); }

SamplerConfig sampler(const Run& r) {
  auto sc = sampler_config_from_json(r.cfg.at("sampler"));
  sc.seed = r.seed("sampler");
  return sc;
}

/// Centre crops of the generated tile size, so reference tiles match a checkpoint.
ImageTensor centre_crop(const ImageTensor& img, std::size_t side) {
  require_image(img);
  if (img.dim(0) < side || img.dim(1) < side) {
    throw DimensionError("image " + shape_str(img.shape()) + " smaller than the " + std::to_string(side) + "px tile");
  }
  return crop_image(img, (img.dim(0) - side) / 2, (img.dim(1) - side) / 2, side, side);
}

ToyCorpus toy(const Run& r, const std::string& generator, std::uint64_t seed_offset, std::size_t n = 0) {
  const auto& d = r.cfg.at("data");
  ToyCorpusSpec s;
  s.generator = generator;
  s.n = n ? n : d.at("n").get<std::size_t>();
  s.resolution = d.at("resolution").get<std::size_t>();
  s.seed = d.at("seed").get<std::uint64_t>() + seed_offset;
  return make_toy_corpus(s);
}

struct Encoded {
  std::vector<LatentTensor> latents;
  std::vector<ConditionGrid> grids;
};

Encoded encode_all(const std::vector<ImageTensor>& images, const LatentCodec& codec, const ConditionEmbedder& emb) {
  Encoded e;
  for (const auto& im : images) {
    e.latents.push_back(codec.encode(im));
    e.grids.push_back(emb.embed_grid(im, kGridSide, kGridSide));
  }
  return e;
}

/// Two-domain examples at a checkpoint's stage, normalized with its LatentNorm.
std::vector<TrainExample> domain_examples(const std::vector<ImageTensor>& images, const Checkpoint& ck,
                                          const std::vector<CellMask>& masks = {}) {
  auto e = encode_all(images, ck_codec(ck), ck_embedder(ck));
  const auto norm = checkpoint_norm(ck);
  for (auto& l : e.latents) l = norm.apply(l);
  StageSpec spec;
  spec.stage = checkpoint_stage(ck);
  return stage_examples(e.latents, e.grids, spec, masks, ck_codec(ck).config().factor);
}

json sets_report(const std::vector<VariationSet>& sets, const std::vector<ImageTensor>& refs, const ConditionEmbedder& emb) {
  // directional check: each output against its own reference and the next one
  std::size_t wins = 0, pairs = 0;
  double matched = 0, shuffled = 0;
  for (const auto& vs : sets)
    for (const auto& img : vs.images) {
      const auto e = emb.embed_patch(img);
      const double a = cosine(e.data(), emb.embed_patch(refs[vs.ref_index]).data());
      const double b = cosine(e.data(), emb.embed_patch(refs[(vs.ref_index + 1) % refs.size()]).data());
      matched += a, shuffled += b, wins += a > b, ++pairs;
    }
  if (pairs == 0 || refs.size() < 2) return json{{"pairs", pairs}};
  return {{"pairs", pairs}, {"matched_cosine", matched / pairs}, {"shuffled_cosine", shuffled / pairs}, {"matched_wins", wins}};
}

void write_sets(const Run& r, const std::vector<VariationSet>& sets, const std::vector<std::string>& ref_names,
                const std::string& prefix) {
  for (const auto& vs : sets)
    for (std::size_t j = 0; j < vs.images.size(); ++j)
      r.png(prefix + "_" + std::to_string(vs.ref_index) + "_" + std::to_string(j) + ".png", vs.images[j]);
  r.write_text(prefix + "_manifest.jsonl", variations_manifest(sets, ref_names, prefix));
}

// ---------------------------------------------------------------------------
// Commands

void cmd_ingest(const Run& r) {
  const auto mode = r.str("mode");
  if (mode == "toy") {
    const auto gen = r.cfg.at("data").at("generator").get<std::string>();
    const auto c = toy(r, gen, 0);
    for (std::size_t i = 0; i < c.images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu", i);
      r.png(fs::path("toy") / "images" / (std::string(name) + ".png"), c.images[i]);
      if (!c.images_b.empty()) r.png(fs::path("toy") / "images_b" / (std::string(name) + ".png"), c.images_b[i]);
      if (!c.masks.empty()) r.png(fs::path("toy") / "masks" / (std::string(name) + ".png"), c.masks[i]);
    }
    json labels = c.labels;
    r.write_json("toy/corpus.json", {{"generator", gen}, {"n", c.images.size()}, {"labels", labels}});
  } else if (mode == "tile") {
    const auto src = r.str("sources");
    if (src.empty()) throw ConfigError("ingest tile needs --sources <dir of .png slides>");
    std::vector<std::string> names;
    const auto images = load_pngs(src, &names);
    std::vector<SourceImage> sources;
    for (std::size_t i = 0; i < images.size(); ++i) sources.push_back({(fs::path(src) / names[i]).string(), images[i], ""});
    ManifestConfig mc;
    mc.patch = r.num("patch");
    mc.stride = r.num("stride");
    mc.test_fraction = r.real("test-fraction");
    mc.seed = r.seed("split");
    mc.filter_tissue = !r.args.at("no-filter").get<bool>();
    const auto m = build_manifest(sources, mc);
    r.write_text("manifest.jsonl", manifest_jsonl(m));
    std::size_t test = 0;
    for (const auto& p : m) test += p.split == "test";
    r.write_json("ingest_report.json", {{"sources", sources.size()}, {"patches", m.size()}, {"test_patches", test}});
  } else if (mode == "cache") {
    const auto mpath = r.str("manifest");
    if (mpath.empty()) throw ConfigError("ingest cache needs --manifest <manifest.jsonl>");
    const auto m = read_manifest(mpath);
    const LatentCodec codec(codec_config_from_json(r.cfg.at("codec")));
    const ConditionEmbedder emb(embedder_config_from_json(r.cfg.at("embedder")));
    const auto rep = precompute_caches(m, codec, emb, {}, r.dir / "cache");
    json errors = json::array();
    for (const auto& [id, msg] : rep.errors) errors.push_back({{"id", id}, {"message", msg}});
    r.write_json("cache_report.json", {{"entries", rep.entries.size()}, {"written", rep.written}, {"skipped", rep.skipped}, {"errors", errors}});
    if (!rep.errors.empty()) throw IoError(std::to_string(rep.errors.size()) + " cache entries failed, see cache_report.json");
  } else {
    throw ConfigError("ingest mode must be toy, tile or cache (got '" + mode + "')");
  }
}

void cmd_train(const Run& r) {
  const int stage = int(r.num("stage"));
  auto spec = StageSpec::toy(stage);
  const auto& sj = r.cfg.at("stages").at(std::to_string(stage));
  spec.steps = r.num("steps") ? r.num("steps") : sj.at("steps").get<std::size_t>();
  spec.batch = r.num("batch") ? r.num("batch") : sj.at("batch").get<std::size_t>();
  spec.validate();

  StageContext ctx;
  ctx.backbone = backbone_config_from_json(r.cfg.at("backbone"));
  ctx.train = train_config_from_json(r.cfg.at("train"));
  ctx.train.seed = r.seed("train");
  ctx.codec = codec_config_from_json(r.cfg.at("codec"));
  ctx.embedder = embedder_config_from_json(r.cfg.at("embedder"));
  ctx.schedule = schedule_config_from_json(r.cfg.at("schedule"));

  std::optional<Checkpoint> prev;
  const auto init = r.str("init");
  if (stage == 1 && !init.empty()) throw ConfigError("stage 1 starts from scratch; drop --init");
  if (stage > 1) {
    if (init.empty() || !fs::exists(init)) {
      throw StageError("stage prerequisite: stage " + std::to_string(stage) + " needs --init <stage " +
                       std::to_string(stage - 1) + " checkpoint>" + (init.empty() ? "" : ", '" + init + "' not found"));
    }
    prev = load_checkpoint(init);
    check_stage_prerequisite(spec, prev, ctx.backbone);
  }

  const LatentCodec codec(ctx.codec);
  const ConditionEmbedder emb(ctx.embedder);
  Encoded e;
  const auto& d = r.cfg.at("data");
  const auto source = d.at("source").get<std::string>();
  if (source == "toy") {
    e = encode_all(toy(r, d.at("generator").get<std::string>(), 0).images, codec, emb);
  } else if (source == "cache") {
    for (auto& p : read_cache(d.at("cache_dir").get<std::string>())) {
      e.latents.push_back(std::move(p.latent));
      e.grids.push_back(std::move(p.grid));
    }
  } else {
    throw ConfigError("data.source must be toy or cache");
  }
  // later stages keep the stage-1 normalization so every stage sees the same latent scale
  ctx.norm = prev ? checkpoint_norm(*prev) : LatentNorm::fit(e.latents);
  for (auto& l : e.latents) l = ctx.norm.apply(l);
  const auto data = stage_examples(e.latents, e.grids, spec, {}, ctx.codec.factor);

  const auto run = train_stage(ctx, prev, data, spec, r.seed("init"), r.dir);
  const auto& L = run.result.losses;
  const std::size_t win = std::min<std::size_t>(50, L.size());
  const auto sm = smoothed(L, win);
  r.write_json("train_report.json",
               {{"stage", stage},
                {"steps", L.size()},
                {"examples", data.size()},
                {"initial_smoothed_loss", sm.empty() ? 0.0 : sm[win - 1]},
                {"final_smoothed_loss", sm.empty() ? 0.0 : sm.back()},
                {"transferred_scalars", run.transferred},
                {"checkpoint", "checkpoints/stage" + std::to_string(stage) + "_step" + std::to_string(L.size()) + ".ckpt"},
                {"content_hash", content_hash(run.checkpoint.params)}});
}

void cmd_sample(const Run& r) {
  const auto ck = load_backbone(r);
  const auto gm = generation_model(ck);
  auto sc = sampler(r);
  sc.guidance.w = 0;  // unconditional: only the null-token branch runs
  StageSpec s;
  s.stage = gm.stage;
  const auto emb = ck_embedder(ck);
  ConditionGrid g{s.tokens_per_side(), s.tokens_per_side(), Tensor<float>({s.tokens_per_crop(), emb.dim()})};
  const auto sets = variations_from_grids({g}, gm, r.num("n"), sc, ck_codec(ck), ck_schedule(ck));
  write_sets(r, sets, {"unconditional"}, "sample");
}

void cmd_variations(const Run& r) {
  const auto ck = load_backbone(r);
  const auto gm = generation_model(ck);
  const auto codec = ck_codec(ck);
  const auto emb = ck_embedder(ck);
  const std::size_t side = stage_image_side(gm.cfg, gm.stage, codec.config().factor);
  std::vector<ImageTensor> refs;
  std::vector<std::string> names;
  if (r.str("refs") == "toy") {
    for (const auto& im : toy(r, r.cfg.at("data").at("generator").get<std::string>(), 1000, r.num("count")).images)
      refs.push_back(centre_crop(im, side));
    for (std::size_t i = 0; i < refs.size(); ++i) names.push_back("toy_" + std::to_string(i));
  } else {
    refs = load_pngs(r.str("refs"), &names);
  }
  const auto sets = generate_variations(refs, gm, r.num("n"), sampler(r), codec, emb, ck_schedule(ck));
  for (std::size_t i = 0; i < refs.size(); ++i) r.png("ref_" + std::to_string(i) + ".png", refs[i]);
  write_sets(r, sets, names, "var");
  r.write_json("variations_report.json", sets_report(sets, refs, emb));
}

void cmd_controlnet(const Run& r) {
  const auto base = load_backbone(r);
  const auto cfg = checkpoint_backbone(base);
  const auto codec = ck_codec(base);
  const std::size_t f = codec.config().factor;
  const auto& cc = r.cfg.at("control");
  Checkpoint ck = base;
  if (r.str("adapter").empty()) {
    const auto corpus = toy(r, "masked-cells", 0);
    const auto data = domain_examples(corpus.images, base, corpus.masks);
    attach_control_branch(ck.params, cfg, f, r.seed("control-init"));
    auto tc = train_config_from_json(r.cfg.at("train"));
    tc.seed = r.seed("control");
    const std::size_t steps = r.num("steps") ? r.num("steps") : cc.at("steps").get<std::size_t>();
    const std::size_t batch = r.num("batch") ? r.num("batch") : cc.at("batch").get<std::size_t>();
    const auto res = train_controlnet(cfg, ck.params, ck_schedule(base), data, tc, steps, batch, f);
    save_checkpoint(r.out("controlnet.ckpt").string(), control_to_checkpoint(ck.params, content_hash(base.params), cfg, f));
    const auto sm = smoothed(res.losses, std::min<std::size_t>(50, res.losses.size()));
    r.write_json("controlnet_train.json", {{"steps", res.losses.size()}, {"final_smoothed_loss", sm.empty() ? 0.0 : sm.back()}});
  } else {
    ck.params = attach_control_checkpoint(base.params, load_checkpoint(r.str("adapter")));
  }

  // sweep on held-out masks
  const auto gm = generation_model(ck);
  const auto emb = ck_embedder(base);
  const std::size_t side = stage_image_side(cfg, gm.stage, f);
  const auto test = toy(r, "masked-cells", 1000, cc.at("sweep_n").get<std::size_t>());
  const auto scales = cc.at("scales").get<std::vector<double>>();
  auto sc = sampler(r);
  json rows = json::array();
  std::size_t wins = 0;
  StageSpec s;
  s.stage = gm.stage;
  for (std::size_t i = 0; i < test.images.size(); ++i) {
    const auto ref = centre_crop(test.images[i], side);
    const std::size_t off = (test.masks[i].dim(0) - side) / 2;
    CellMask m({side, side});
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) m.at(y, x) = test.masks[i].at(off + y, off + x);
    sc.seed = variation_seed(r.seed("sampler"), i, 0);
    const auto out = control_guidance_sweep(gm, emb.embed_grid(ref, s.tokens_per_side(), s.tokens_per_side()), m, scales, sc,
                                            codec, ck_schedule(base), cc.at("density_threshold").get<double>());
    r.png("sweep/mask_" + std::to_string(i) + ".png", m);
    for (std::size_t k = 0; k < out.size(); ++k) {
      r.png("sweep/img_" + std::to_string(i) + "_s" + std::to_string(k) + ".png", out[k].image);
      rows.push_back({{"index", i}, {"scale", out[k].scale}, {"agreement", out[k].agreement}, {"seed", sc.seed}});
    }
    wins += out.back().agreement >= out.front().agreement;
  }
  r.write_json("control_sweep.json", {{"rows", rows}, {"max_scale_at_least_zero_scale", wins}, {"n", test.images.size()}});
}

void cmd_lora(const Run& r) {
  auto base = load_backbone(r);
  const auto cfg = checkpoint_backbone(base);
  const auto& lc = r.cfg.at("lora");
  const auto corpus = toy(r, "two-domain", 0);
  auto data = domain_examples(corpus.images_b, base);
  const std::size_t held = std::max<std::size_t>(1, data.size() / 10);
  const std::vector<TrainExample> test(data.end() - std::ptrdiff_t(held), data.end());
  data.resize(data.size() - held);
  auto tc = train_config_from_json(r.cfg.at("train"));
  tc.seed = r.seed("lora");
  const auto sched = ck_schedule(base);
  const auto get = [&](const char* k) { return r.num(k) ? r.num(k) : lc.at(k).get<std::size_t>(); };
  const double alpha = r.real("alpha") > 0 ? r.real("alpha") : lc.at("alpha").get<double>();
  const auto run = lora_finetune(cfg, base.params, sched, data, tc, get("steps"), get("batch"), get("rank"), alpha,
                                 r.seed("lora-init"));
  const auto eval_seed = r.seed("eval");
  const std::size_t eb = std::min<std::size_t>(32, test.size());
  const double before = evaluate_loss(cfg, base.params, sched, test, eval_seed, eb, 8);
  const double after = evaluate_loss(cfg, base.params, sched, test, eval_seed, eb, 8, frozen_lora_override(run.set));
  save_checkpoint(r.out("lora.ckpt").string(), lora_to_checkpoint(run.set));
  r.write_json("lora_report.json", {{"loss_base", before},
                                    {"loss_lora", after},
                                    {"held_out_examples", test.size()},
                                    {"trainable_scalars", run.set.trainable_count()},
                                    {"base_hash", run.base_hash_after}});
}

void cmd_flow_train(const Run& r) {
  const auto fc = flow_config_from_json(r.cfg.at("flow"));
  const auto& ft = r.cfg.at("flow_train");
  FlowTrainConfig tc;
  tc.lr = ft.at("lr").get<double>();
  tc.weight_decay = ft.at("weight_decay").get<double>();
  tc.batch = ft.at("batch").get<std::size_t>();
  tc.steps = r.num("steps") ? r.num("steps") : ft.at("steps").get<std::size_t>();
  tc.seed = r.seed("flow");
  const ConditionEmbedder emb(embedder_config_from_json(r.cfg.at("embedder")));
  const auto c = toy(r, "two-domain", 0);
  // paired per-token embeddings of the same tissue in both stains
  const std::size_t per = kGridSide * kGridSide, d = emb.dim();
  Tensor<float> x0({c.images.size() * per, d}), x1({c.images.size() * per, d});
  for (std::size_t i = 0; i < c.images.size(); ++i) {
    const auto a = emb.embed_grid(c.images[i], kGridSide, kGridSide), b = emb.embed_grid(c.images_b[i], kGridSide, kGridSide);
    std::copy(a.tokens.data().begin(), a.tokens.data().end(), x0.data().begin() + std::ptrdiff_t(i * per * d));
    std::copy(b.tokens.data().begin(), b.tokens.data().end(), x1.data().begin() + std::ptrdiff_t(i * per * d));
  }
  auto net = init_flow_net(fc, r.seed("flow-init"));
  const auto losses = train_flow(fc, net, x0, x1, tc);
  save_checkpoint(r.out("flow.ckpt").string(), flow_checkpoint(fc, tc, net));
  const auto sm = smoothed(losses, std::min<std::size_t>(50, losses.size()));
  r.write_json("flow_report.json", {{"pairs", x0.dim(0)},
                                    {"steps", losses.size()},
                                    {"first_loss", losses.empty() ? 0.0 : losses.front()},
                                    {"final_smoothed_loss", sm.empty() ? 0.0 : sm.back()}});
}

void cmd_translate(const Run& r) {
  auto ck = load_backbone(r);
  LoraSet lora;
  BoundParams<float>::Override ov;
  if (!r.str("lora").empty()) {
    lora = lora_from_checkpoint(load_checkpoint(r.str("lora")), ck.params);
    ov = frozen_lora_override(lora);
  }
  const auto gm = generation_model(ck, ov);
  const auto codec = ck_codec(ck);
  const auto emb = ck_embedder(ck);
  FlowConfig fc = flow_config_from_json(r.cfg.at("flow"));
  ModelParams<float> flow;
  if (r.str("flow") == "identity") {
    flow = init_flow_net(fc, r.seed("flow-init"));  // zero output layer: v = 0
  } else {
    auto fck = load_checkpoint(r.str("flow"));
    fc = checkpoint_flow_config(fck);
    flow = std::move(fck.params);
  }
  const std::size_t side = stage_image_side(gm.cfg, gm.stage, codec.config().factor);
  std::vector<ImageTensor> src, truth;
  std::vector<std::string> names;
  if (r.str("sources") == "toy") {
    const auto c = toy(r, "two-domain", 1000, r.num("count"));
    for (std::size_t i = 0; i < c.images.size(); ++i) {
      src.push_back(centre_crop(c.images[i], side));
      truth.push_back(centre_crop(c.images_b[i], side));
      names.push_back("toy_" + std::to_string(i));
    }
  } else {
    src = load_pngs(r.str("sources"), &names);
  }
  const auto sets =
      stain_translate_pipeline(src, fc, flow, gm, r.num("n"), sampler(r), codec, emb, ck_schedule(ck), r.num("flow-steps"));
  for (std::size_t i = 0; i < src.size(); ++i) r.png("src_" + std::to_string(i) + ".png", src[i]);
  write_sets(r, sets, names, "tr");
  json rep = {{"tiles", src.size()}};
  if (!truth.empty()) {
    std::size_t wins = 0, pairs = 0;
    for (const auto& vs : sets)
      for (const auto& img : vs.images) {
        const auto e = emb.embed_patch(img);
        wins += cosine(e.data(), emb.embed_patch(truth[vs.ref_index]).data()) >
                cosine(e.data(), emb.embed_patch(src[vs.ref_index]).data());
        ++pairs;
      }
    rep["closer_to_target"] = wins;
    rep["pairs"] = pairs;
  }
  r.write_json("translate_report.json", rep);
}

void cmd_eval(const Run& r) {
  if (r.str("real").empty() || r.str("fake").empty()) throw ConfigError("eval needs --real and --fake directories");
  const auto real = load_pngs(r.str("real")), fake = load_pngs(r.str("fake"));
  const auto& ec = r.cfg.at("eval");
  const FeatureExtractor ex;
  const ConditionEmbedder emb(embedder_config_from_json(r.cfg.at("embedder")));
  json reports = json::array();
  std::stringstream ss(r.str("metrics"));
  std::string m;
  auto paired = [&](const char* what) {
    if (real.size() != fake.size()) {
      throw DimensionError(std::string(what) + " pairs images by sorted filename; got " + std::to_string(real.size()) +
                           " real and " + std::to_string(fake.size()) + " fake");
    }
  };
  while (std::getline(ss, m, ',')) {
    if (m == "fid") {
      reports.push_back(full_image_fid(fake, real, ex, ec.at("eps_reg").get<double>()).to_json());
    } else if (m == "kid") {
      const auto fa = ex.features(fake), fb = ex.features(real);
      const std::size_t sub = std::min({ec.at("kid_subset").get<std::size_t>(), fa.dim(0), fb.dim(0)});
      MetricReport k{"kid", kid(fa, fb, ec.at("kid_degree").get<int>(), sub, ec.at("kid_subsets").get<std::size_t>(), r.seed("kid")), {}};
      k.protocol = {{"subset", sub}, {"subsets", ec.at("kid_subsets")}, {"degree", ec.at("kid_degree")}, {"extractor", ex.id()}};
      reports.push_back(k.to_json());
    } else if (m == "similarity") {
      paired("similarity");
      reports.push_back(MetricReport{"embedding_similarity", embedding_similarity(real, fake, emb), {{"n", real.size()}}}.to_json());
    } else if (m == "ssim" || m == "psnr") {
      paired(m.c_str());
      double s = 0;
      for (std::size_t i = 0; i < real.size(); ++i) s += m == "ssim" ? ssim(real[i], fake[i]) : psnr(real[i], fake[i]);
      reports.push_back(MetricReport{m, s / double(real.size()), {{"n", real.size()}, {"reduction", "mean"}}}.to_json());
    } else if (!m.empty()) {
      throw ConfigError("unknown metric '" + m + "' (fid, kid, similarity, ssim, psnr)");
    }
  }
  r.write_json("eval_report.json", {{"metrics", reports}});
}

void cmd_sweep(const Run& r) {
  SweepResult res;
  if (!r.str("table").empty()) {
    std::ifstream in(r.str("table"));
    if (!in) throw IoError("cannot open '" + r.str("table") + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError("'" + r.str("table") + "': " + e.what());
    }
    res = sweep_from_json(j);
  } else {
    // live sweep: FID of n variations per w against the references themselves
    const auto ck = load_backbone(r);
    const auto gm = generation_model(ck);
    const auto codec = ck_codec(ck);
    const auto emb = ck_embedder(ck);
    const std::size_t side = stage_image_side(gm.cfg, gm.stage, codec.config().factor);
    std::vector<ImageTensor> refs;
    for (const auto& im : toy(r, r.cfg.at("data").at("generator").get<std::string>(), 1000, r.num("count")).images)
      refs.push_back(centre_crop(im, side));
    const FeatureExtractor ex;
    const auto ws = r.args.at("w").get<std::vector<double>>();
    res = guidance_sweep(ws, [&](double w) {
      auto sc = sampler(r);
      sc.guidance.w = w;
      std::vector<ImageTensor> synth;
      for (auto& vs : generate_variations(refs, gm, 1, sc, codec, emb, ck_schedule(ck))) synth.push_back(vs.images[0]);
      return full_image_fid(synth, refs, ex, r.cfg.at("eval").at("eps_reg").get<double>()).value;
    });
  }
  r.write_json("sweep.json", res.to_json());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tilediff: toy-scale pathology diffusion toolkit"};
  app.require_subcommand(0, 1);  // an echoed --config names its own command
  app.fallthrough();
  std::string config_path, run_dir = "run";
  std::uint64_t seed = 0;
  bool dry_run = false;
  app.add_option("--config", config_path, "RunConfig JSON (an echoed config.json reruns that command)");
  auto* seed_opt = app.add_option("--seed", seed, "run seed; every stream is derived from it");
  app.add_option("--run-dir", run_dir, "output directory");
  app.add_flag("--dry-run", dry_run, "print the resolved RunConfig and exit");

  std::deque<Command> cmds;
  auto& ingest = cmds.emplace_back(app, "ingest", "toy corpus export, slide tiling, latent/embedding caches");
  ingest.positional("mode", "toy", "toy | tile | cache");
  ingest.option("sources", "", "tile: directory of .png slides");
  ingest.option("patch", 32, "tile: patch size");
  ingest.option("stride", 32, "tile: stride");
  ingest.option("test-fraction", 0.1, "tile: fraction of sources held out");
  ingest.flag("no-filter", "tile: keep background patches");
  ingest.option("manifest", "", "cache: manifest.jsonl to cache");
  auto& train = cmds.emplace_back(app, "train", "train one curriculum stage");
  train.option("stage", 1, "1, 2 or 3");
  train.option("init", "", "previous-stage checkpoint (stages 2 and 3)");
  train.option("steps", 0, "override stages.<n>.steps");
  train.option("batch", 0, "override stages.<n>.batch");
  auto& sample = cmds.emplace_back(app, "sample", "unconditional samples");
  sample.option("checkpoint", "", "backbone checkpoint");
  sample.option("n", 4, "number of samples");
  auto& vars = cmds.emplace_back(app, "variations", "conditional variations of reference tiles");
  vars.option("checkpoint", "", "backbone checkpoint");
  vars.option("refs", "toy", "'toy' or a directory of .png tiles");
  vars.option("count", 8, "toy references to draw");
  vars.option("n", 2, "variations per reference");
  auto& cn = cmds.emplace_back(app, "controlnet-train", "train a mask ControlNet on a frozen base, then sweep control scales");
  cn.option("checkpoint", "", "base checkpoint");
  cn.option("adapter", "", "existing controlnet.ckpt: skip training and only sweep");
  cn.option("steps", 0, "override control.steps");
  cn.option("batch", 0, "override control.batch");
  auto& lora = cmds.emplace_back(app, "lora-train", "LoRA fine-tune on the second toy domain");
  lora.option("checkpoint", "", "base checkpoint");
  lora.option("steps", 0, "override lora.steps");
  lora.option("batch", 0, "override lora.batch");
  lora.option("rank", 0, "override lora.rank");
  lora.option("alpha", 0.0, "override lora.alpha");
  auto& flow = cmds.emplace_back(app, "flow-train", "rectified flow between paired domain embeddings");
  flow.option("steps", 0, "override flow_train.steps");
  auto& tr = cmds.emplace_back(app, "translate", "embed, translate, generate");
  tr.option("checkpoint", "", "backbone checkpoint");
  tr.option("flow", "identity", "'identity' or a flow.ckpt");
  tr.option("lora", "", "optional lora.ckpt for the target domain");
  tr.option("sources", "toy", "'toy' or a directory of .png tiles");
  tr.option("count", 8, "toy sources to draw");
  tr.option("n", 1, "outputs per source");
  tr.option("flow-steps", 50, "Euler steps");
  auto& ev = cmds.emplace_back(app, "eval", "metrics between two image directories");
  ev.option("real", "", "directory of real .png");
  ev.option("fake", "", "directory of generated .png");
  ev.option("metrics", "fid,kid,similarity,ssim,psnr", "comma list");
  auto& sw = cmds.emplace_back(app, "sweep", "guidance-scale sweep");
  sw.option("table", "", "fixture JSON of metric per w");
  sw.option("checkpoint", "", "backbone checkpoint for a live sweep");
  sw.option("w", json::array({1.0, 1.5, 2.0, 3.0}), "comma list of guidance scales");
  sw.option("count", 16, "toy references per w");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", e.what(), kUsage);
  }

  try {
    json cfg = default_run_config();
    json file_cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw IoError("cannot open config '" + config_path + "'");
      try {
        file_cfg = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("config '" + config_path + "': " + e.what());
      }
      if (!file_cfg.is_object()) throw ConfigError("config must be a JSON object");
      cfg.merge_patch(file_cfg);
    }
    if (seed_opt->count()) cfg["seed"] = seed;

    const Command* cmd = nullptr;
    for (const auto& c : cmds)
      if (c.app()->parsed()) cmd = &c;
    if (!cmd && file_cfg.contains("command")) {
      const auto want = file_cfg["command"].value("name", "");
      for (const auto& c : cmds)
        if (c.name() == want) cmd = &c;
      if (!cmd) throw ConfigError("config names unknown command '" + want + "'");
    }
    if (!cmd) return report_error("usage", "a command is required (run with --help)", kUsage);
    const bool same = file_cfg.contains("command") && file_cfg["command"].value("name", "") == cmd->name();
    const json prior_args = same ? file_cfg["command"].value("args", json::object()) : json::object();
    const json prior_inputs = same ? file_cfg.value("inputs", json::object()) : json::object();
    Run r{cfg, cmd->resolve(prior_args), fs::path(run_dir)};

    r.cfg["command"] = {{"name", cmd->name()}, {"args", r.args}};
    r.cfg["inputs"] = json::object();
    for (const char* k : {"init", "checkpoint", "adapter", "refs", "sources", "manifest", "flow", "lora", "real", "fake", "table"}) {
      if (!r.args.contains(k) || !is_path_input(r.args[k].get<std::string>())) continue;
      const auto p = r.args[k].get<std::string>();
      if (!fs::exists(p)) continue;  // the command reports it with the right family
      r.cfg["inputs"][k] = hash_input(p);
      if (prior_inputs.contains(k) && prior_inputs[k] != r.cfg["inputs"][k]) {
        throw IoError("input --" + std::string(k) + " '" + p + "' has changed since the echoed run");
      }
    }
    if (cfg.at("data").at("source") == "cache") r.cfg["inputs"]["data.cache_dir"] = hash_input(cfg["data"]["cache_dir"].get<std::string>());

    std::cout << r.cfg.dump(2) << std::endl;
    if (dry_run) return kOk;
    r.write_json("config.json", r.cfg);

    const std::string n = cmd->name();
    if (n == "ingest") cmd_ingest(r);
    else if (n == "train") cmd_train(r);
    else if (n == "sample") cmd_sample(r);
    else if (n == "variations") cmd_variations(r);
    else if (n == "controlnet-train") cmd_controlnet(r);
    else if (n == "lora-train") cmd_lora(r);
    else if (n == "flow-train") cmd_flow_train(r);
    else if (n == "translate") cmd_translate(r);
    else if (n == "eval") cmd_eval(r);
    else if (n == "sweep") cmd_sweep(r);
    return kOk;
  } catch (const StageError& e) {
    return report_error("StageError", e.what(), kStage);
  } catch (const ConfigError& e) {
    return report_error("ConfigError", e.what(), kConfig);
  } catch (const DimensionError& e) {
    return report_error("DimensionError", e.what(), kDimension);
  } catch (const NumericError& e) {
    return report_error("NumericError", e.what(), kNumeric);
  } catch (const IoError& e) {
    return report_error("IoError", e.what(), kIo);
  } catch (const json::exception& e) {
    return report_error("ConfigError", std::string("config: ") + e.what(), kConfig);
  } catch (const std::exception& e) {
    return report_error("Error", e.what(), kOther);
  }
}
