#pragma once

// Tiling, tissue filtering, manifests, precomputed caches and the procedural toy
// corpora everything else trains on.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilediff/condition_embedder.hpp"
#include "tilediff/error.hpp"
#include "tilediff/hash.hpp"
#include "tilediff/image.hpp"
#include "tilediff/latent_codec.hpp"
#include "tilediff/rng.hpp"

namespace tilediff {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Tiling and tissue thresholding

struct TileCoord {
  std::size_t y = 0;
  std::size_t x = 0;
};

/// Row-major top-left corners; partial edge tiles are dropped.
inline std::vector<TileCoord> tile_image(std::size_t height, std::size_t width, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw ConfigError("tile_image: patch and stride must be positive");
  if (patch > height || patch > width) {
    throw DimensionError("tile_image: patch " + std::to_string(patch) + " larger than image " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  std::vector<TileCoord> out;
  for (std::size_t y = 0; y + patch <= height; y += stride)
    for (std::size_t x = 0; x + patch <= width; x += stride) out.push_back({y, x});
  return out;
}

inline std::vector<TileCoord> tile_image(const ImageTensor& img, std::size_t patch, std::size_t stride) {
  require_image(img);
  return tile_image(img.dim(0), img.dim(1), patch, stride);
}

struct TissueConfig {
  double white_level = 0.85;  // background if every channel is above this
  double min_foreground = 0.25;
};

struct TissueDecision {
  bool keep = false;
  double foreground = 0;
};

inline TissueDecision tissue_filter(const ImageTensor& patch, const TissueConfig& cfg = {}) {
  require_image(patch, "tissue_filter input");
  const std::size_t n = patch.dim(0) * patch.dim(1);
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = &patch.data()[i * 3];
    if (std::min({p[0], p[1], p[2]}) <= cfg.white_level) ++fg;
  }
  const double frac = double(fg) / double(n);
  return {frac >= cfg.min_foreground, frac};
}

// ---------------------------------------------------------------------------
// Manifest

struct PatchRecord {
  std::string id;
  std::string source;
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 0;
  std::string split;  // "train" | "test"
  std::string tag;
};

inline nlohmann::json to_json(const PatchRecord& r) {
  return {{"id", r.id}, {"source", r.source}, {"x", r.x}, {"y", r.y}, {"size", r.size}, {"split", r.split}, {"tag", r.tag}};
}

inline PatchRecord patch_record_from_json(const nlohmann::json& j) {
  return {j.at("id"), j.at("source"), j.at("x"), j.at("y"), j.at("size"), j.at("split"), j.value("tag", "")};
}

using PatchManifest = std::vector<PatchRecord>;

/// Uniform in [0, 1) from the seeded hash of a source name.
inline double source_hash_unit(const std::string& source, std::uint64_t seed) {
  Sha256 h;
  h.update(std::to_string(seed)).update("|").update(source);
  const std::string hex = h.hex();
  return double(std::stoull(hex.substr(0, 13), nullptr, 16)) / double(1ull << 52);
}

inline std::string split_for_source(const std::string& source, double test_fraction, std::uint64_t seed) {
  return source_hash_unit(source, seed) < test_fraction ? "test" : "train";
}

inline std::string patch_id(const std::string& source, std::size_t x, std::size_t y, std::size_t size) {
  return sha256_hex(source + "|" + std::to_string(x) + "|" + std::to_string(y) + "|" + std::to_string(size)).substr(0, 16);
}

struct SourceImage {
  std::string name;  // path or logical name, used for split hashing
  ImageTensor image;
  std::string tag;
};

struct ManifestConfig {
  std::size_t patch = 32;
  std::size_t stride = 32;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
  TissueConfig tissue;
  bool filter_tissue = true;
};

inline PatchManifest build_manifest(const std::vector<SourceImage>& sources, const ManifestConfig& cfg) {
  if (sources.empty()) throw ConfigError("build_manifest: no sources");
  if (!(cfg.test_fraction >= 0 && cfg.test_fraction <= 1)) throw ConfigError("test fraction must be in [0, 1]");
  PatchManifest out;
  std::set<std::string> ids;
  for (const auto& src : sources) {
    const std::string split = split_for_source(src.name, cfg.test_fraction, cfg.seed);
    for (const auto& c : tile_image(src.image, cfg.patch, cfg.stride)) {
      if (cfg.filter_tissue && !tissue_filter(crop_image(src.image, c.y, c.x, cfg.patch, cfg.patch), cfg.tissue).keep)
        continue;
      PatchRecord r{patch_id(src.name, c.x, c.y, cfg.patch), src.name, c.x, c.y, cfg.patch, split, src.tag};
      if (!ids.insert(r.id).second) throw ConfigError("build_manifest: duplicate patch " + src.name);
      out.push_back(std::move(r));
    }
  }
  if (out.empty()) throw ConfigError("build_manifest: no patches left after tissue filtering");
  return out;
}

inline std::string manifest_jsonl(const PatchManifest& m) {
  std::string s;
  for (const auto& r : m) s += to_json(r).dump() + "\n";
  return s;
}

inline void write_manifest(const std::string& path, const PatchManifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path);
  out << manifest_jsonl(m);
}

inline PatchManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  PatchManifest m;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      m.push_back(patch_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Caches: one latent and one condition grid per manifest entry, stored under
// the hash of (source bytes, crop, codec config, embedder config).

struct CacheConfig {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
};

struct CacheEntry {
  std::string id;
  std::string key;
};

struct CacheReport {
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::vector<CacheEntry> entries;
  std::vector<std::pair<std::string, std::string>> errors;  // (id, message)
};

inline std::string cache_key(const std::string& source_hash, const PatchRecord& r, const CodecConfig& codec,
                             const EmbedderConfig& emb, const CacheConfig& cc) {
  nlohmann::json j = {{"src", source_hash},     {"x", r.x},           {"y", r.y},           {"size", r.size},
                      {"codec_f", codec.factor}, {"codec_seed", codec.seed}, {"emb_dim", emb.dim}, {"emb_window", emb.window},
                      {"emb_seed", emb.seed},   {"rows", cc.grid_rows}, {"cols", cc.grid_cols}};
  return sha256_hex(j.dump());
}

inline fs::path latent_cache_path(const fs::path& dir, const std::string& key) { return dir / "latents" / (key + ".lftn"); }
inline fs::path grid_cache_path(const fs::path& dir, const std::string& key) { return dir / "grids" / (key + ".lftn"); }

/// Image loader for manifest sources; the default reads PNG files.
using SourceLoader = std::function<ImageTensor(const std::string&)>;

inline CacheReport precompute_caches(const PatchManifest& manifest, const LatentCodec& codec,
                                     const ConditionEmbedder& embedder, const CacheConfig& cc, const fs::path& dir,
                                     const SourceLoader& load = read_png) {
  fs::create_directories(dir / "latents");
  fs::create_directories(dir / "grids");
  CacheReport rep;
  std::map<std::string, std::pair<ImageTensor, std::string>> sources;  // name -> (image, content hash)
  for (const auto& r : manifest) {
    try {
      auto it = sources.find(r.source);
      if (it == sources.end()) {
        ImageTensor img = load(r.source);
        Sha256 h;
        h.update(shape_str(img.shape())).update_pod<float>(img.data());
        it = sources.emplace(r.source, std::pair{std::move(img), h.hex()}).first;
      }
      const auto& [img, src_hash] = it->second;
      const std::string key = cache_key(src_hash, r, codec.config(), embedder.config(), cc);
      rep.entries.push_back({r.id, key});
      const auto lp = latent_cache_path(dir, key), gp = grid_cache_path(dir, key);
      if (fs::exists(lp) && fs::exists(gp)) {
        ++rep.skipped;
        continue;
      }
      const ImageTensor patch = crop_image(img, r.y, r.x, r.size, r.size);
      std::ofstream lo(lp, std::ios::binary), go(gp, std::ios::binary);
      if (!lo || !go) throw IoError("cannot write cache files for " + r.id);
      write_lftn(lo, codec.encode(patch));
      write_lftn(go, embedder.embed_grid(patch, cc.grid_rows, cc.grid_cols).tokens);
      ++rep.written;
    } catch (const std::exception& e) {
      rep.errors.emplace_back(r.id, e.what());
    }
  }
  std::string index;
  for (const auto& e : rep.entries) index += nlohmann::json{{"id", e.id}, {"key", e.key}}.dump() + "\n";
  const auto ip = dir / "index.jsonl";
  std::string old;
  if (fs::exists(ip)) old = file_bytes(ip.string());
  if (old != index) {
    std::ofstream out(ip, std::ios::binary | std::ios::trunc);
    out << index;
  }
  return rep;
}

struct CachedPatch {
  LatentTensor latent;
  ConditionGrid grid;
};

inline CachedPatch read_cache_entry(const fs::path& dir, const std::string& key, const CacheConfig& cc = {}) {
  std::ifstream li(latent_cache_path(dir, key), std::ios::binary), gi(grid_cache_path(dir, key), std::ios::binary);
  if (!li || !gi) throw IoError("cache entry " + key + " missing under " + dir.string());
  CachedPatch p{read_lftn(li), ConditionGrid{cc.grid_rows, cc.grid_cols, read_lftn(gi)}};
  if (p.grid.tokens.rank() != 2 || p.grid.tokens.dim(0) != cc.grid_rows * cc.grid_cols) {
    throw IoError("cache entry " + key + ": grid has shape " + shape_str(p.grid.tokens.shape()));
  }
  return p;
}

/// Every entry listed in dir/index.jsonl, in index order.
inline std::vector<CachedPatch> read_cache(const fs::path& dir, const CacheConfig& cc = {}) {
  std::ifstream in(dir / "index.jsonl");
  if (!in) throw IoError("no cache index under " + dir.string());
  std::vector<CachedPatch> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(read_cache_entry(dir, nlohmann::json::parse(line).at("key").get<std::string>(), cc));
  return out;
}

// ---------------------------------------------------------------------------
// Toy corpora

struct ToyCorpusSpec {
  std::string generator = "textures";  // textures | two-domain | masked-cells
  std::size_t n = 0;
  std::size_t resolution = 32;
  std::uint64_t seed = 0;
  std::size_t classes = 4;  // textures only
  double density = 0.3;     // masked-cells only: target mask fraction
};

struct ToyCorpus {
  std::vector<ImageTensor> images;     // textures: the images; two-domain: domain A; masked-cells: images
  std::vector<ImageTensor> images_b;   // two-domain: domain B (paired with images)
  std::vector<Tensor<float>> structure;  // two-domain: shared structural field [H, W]
  std::vector<CellMask> masks;         // masked-cells
  std::vector<int> labels;             // textures: class index
};

namespace detail {

using Rgb = std::array<double, 3>;

/// Bilinear value noise at the given cell size, values in [0, 1].
inline std::vector<double> value_noise(KeyedRng& rng, std::size_t res, std::size_t cell) {
  const std::size_t g = res / cell + 2;
  std::vector<double> lattice(g * g);
  for (auto& v : lattice) v = rng.uniform();
  std::vector<double> out(res * res);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const double fy = double(y) / double(cell), fx = double(x) / double(cell);
      const std::size_t iy = std::size_t(fy), ix = std::size_t(fx);
      const double ty = fy - double(iy), tx = fx - double(ix);
      const double sy = ty * ty * (3 - 2 * ty), sx = tx * tx * (3 - 2 * tx);
      const double a = lattice[iy * g + ix], b = lattice[iy * g + ix + 1];
      const double c = lattice[(iy + 1) * g + ix], d = lattice[(iy + 1) * g + ix + 1];
      out[y * res + x] = (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy;
    }
  return out;
}

/// Multi-scale structure field in [0, 1]; `weights[k]` scales octave cell = res / 2^(k+1).
inline std::vector<double> structure_field(KeyedRng& rng, std::size_t res, const std::vector<double>& weights) {
  std::vector<double> f(res * res, 0.0);
  double total = 0;
  std::size_t cell = std::max<std::size_t>(res / 2, 1);
  for (double w : weights) {
    const auto n = value_noise(rng, res, cell);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += w * n[i];
    total += w;
    cell = std::max<std::size_t>(cell / 2, 1);
  }
  for (auto& v : f) v /= total;
  return f;
}

/// Piecewise-linear 3-stop colour ramp.
inline Rgb ramp(const std::array<Rgb, 3>& stops, double s) {
  s = std::clamp(s, 0.0, 1.0);
  const double u = s < 0.5 ? s * 2 : (s - 0.5) * 2;
  const Rgb& a = s < 0.5 ? stops[0] : stops[1];
  const Rgb& b = s < 0.5 ? stops[1] : stops[2];
  return {a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), a[2] + u * (b[2] - a[2])};
}

inline ImageTensor paint(const std::vector<double>& field, std::size_t res, const std::array<Rgb, 3>& stops) {
  ImageTensor img({res, res, 3});
  for (std::size_t i = 0; i < res * res; ++i) {
    const Rgb c = ramp(stops, field[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) img.data()[i * 3 + ch] = float(std::clamp(c[ch], 0.0, 1.0));
  }
  return img;
}

// Per-class palettes (light -> dark) and octave weights for the textures generator.
inline const std::vector<std::array<Rgb, 3>>& texture_palettes() {
  static const std::vector<std::array<Rgb, 3>> p = {
      {{{0.95, 0.80, 0.88}, {0.80, 0.45, 0.65}, {0.35, 0.15, 0.45}}},  // pink / purple
      {{{0.90, 0.88, 0.95}, {0.55, 0.55, 0.85}, {0.15, 0.15, 0.45}}},  // lavender / blue
      {{{0.98, 0.92, 0.80}, {0.85, 0.60, 0.40}, {0.50, 0.25, 0.10}}},  // cream / brown
      {{{0.85, 0.95, 0.88}, {0.45, 0.70, 0.55}, {0.10, 0.35, 0.25}}},  // mint / green
  };
  return p;
}

inline const std::vector<std::vector<double>>& texture_octaves() {
  static const std::vector<std::vector<double>> w = {{1.0, 0.5, 0.25}, {0.2, 1.0, 0.5}, {0.5, 0.3, 1.0}, {1.0, 0.1, 0.6}};
  return w;
}

// Two-domain palettes: "structural" stain vs "molecular" stain.
inline const std::array<Rgb, 3> kDomainA = {{{0.96, 0.85, 0.90}, {0.82, 0.50, 0.70}, {0.40, 0.18, 0.50}}};
inline const std::array<Rgb, 3> kDomainB = {{{0.93, 0.93, 0.97}, {0.70, 0.55, 0.40}, {0.35, 0.20, 0.10}}};

}  // namespace detail

inline ToyCorpus make_toy_corpus(const ToyCorpusSpec& spec) {
  if (spec.resolution < 4) throw ConfigError("toy corpus resolution must be at least 4");
  ToyCorpus c;
  const std::size_t res = spec.resolution;
  if (spec.generator == "textures") {
    if (spec.classes == 0 || spec.classes > detail::texture_palettes().size()) {
      throw ConfigError("textures generator supports 1.." + std::to_string(detail::texture_palettes().size()) + " classes");
    }
    for (std::size_t i = 0; i < spec.n; ++i) {
      KeyedRng rng(spec.seed, 0x7e47, i);
      const int cls = int(i % spec.classes);
      const auto field = detail::structure_field(rng, res, detail::texture_octaves()[std::size_t(cls)]);
      auto stops = detail::texture_palettes()[std::size_t(cls)];
      const double jitter = 0.06 * (rng.uniform() - 0.5);
      for (auto& s : stops)
        for (auto& v : s) v += jitter;
      c.images.push_back(detail::paint(field, res, stops));
      c.labels.push_back(cls);
    }
  } else if (spec.generator == "two-domain") {
    for (std::size_t i = 0; i < spec.n; ++i) {
      KeyedRng rng(spec.seed, 0x2d0a, i);
      const auto field = detail::structure_field(rng, res, {1.0, 0.6, 0.3});
      Tensor<float> s({res, res});
      for (std::size_t k = 0; k < field.size(); ++k) s[k] = float(field[k]);
      c.structure.push_back(std::move(s));
      c.images.push_back(detail::paint(field, res, detail::kDomainA));
      c.images_b.push_back(detail::paint(field, res, detail::kDomainB));
    }
  } else if (spec.generator == "masked-cells") {
    if (!(spec.density > 0 && spec.density < 0.9)) throw ConfigError("masked-cells density must be in (0, 0.9)");
    for (std::size_t i = 0; i < spec.n; ++i) {
      KeyedRng rng(spec.seed, 0xce11, i);
      CellMask mask({res, res});
      std::size_t on = 0;
      const double target = spec.density * double(res * res);
      for (int attempt = 0; attempt < 400 && double(on) < target; ++attempt) {
        const double cy = rng.uniform() * double(res), cx = rng.uniform() * double(res);
        const double r = 1.5 + 1.5 * rng.uniform();
        CellMask next = mask;
        std::size_t next_on = on;
        for (std::size_t y = 0; y < res; ++y)
          for (std::size_t x = 0; x < res; ++x) {
            const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r && next.at(y, x) == 0.0f) {
              next.at(y, x) = 1.0f;
              ++next_on;
            }
          }
        // keep the disc unless it overshoots by more than it would have fallen short
        if (double(next_on) <= target || double(next_on) - target < target - double(on)) {
          mask = std::move(next);
          on = next_on;
        } else {
          break;
        }
      }
      // texture: light stroma, dark nuclei; both modulated by fine noise
      const auto noise = detail::value_noise(rng, res, 2);
      ImageTensor img({res, res, 3});
      for (std::size_t k = 0; k < res * res; ++k) {
        const double n = noise[k] - 0.5;
        const detail::Rgb col = mask.data()[k] > 0.5f ? detail::Rgb{0.30 + 0.1 * n, 0.15 + 0.08 * n, 0.45 + 0.1 * n}
                                                      : detail::Rgb{0.92 + 0.05 * n, 0.78 + 0.08 * n, 0.86 + 0.05 * n};
        for (std::size_t ch = 0; ch < 3; ++ch) img.data()[k * 3 + ch] = float(std::clamp(col[ch], 0.0, 1.0));
      }
      c.images.push_back(std::move(img));
      c.masks.push_back(std::move(mask));
    }
  } else {
    throw ConfigError("unknown toy generator '" + spec.generator + "' (textures, two-domain, masked-cells)");
  }
  return c;
}

/// Darkness proxy for cell density: 1 - mean(rgb) > threshold.
inline CellMask density_mask(const ImageTensor& img, double threshold = 0.45) {
  require_image(img);
  CellMask m({img.dim(0), img.dim(1)});
  for (std::size_t k = 0; k < m.size(); ++k) {
    const float* p = &img.data()[k * 3];
    m[k] = 1.0 - (double(p[0]) + p[1] + p[2]) / 3.0 > threshold ? 1.0f : 0.0f;
  }
  return m;
}

}  // namespace tilediff
