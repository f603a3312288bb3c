#pragma once

// Checkpoint container:
//   "LFCK0001" | u32 header length | header JSON | u32 tensor count |
//   per tensor: u32 name length | name | LFTN tensor
// The content hash covers only the tensor section, so editing metadata does not
// change the identity of the weights.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "tilediff/backbone.hpp"
#include "tilediff/error.hpp"
#include "tilediff/hash.hpp"
#include "tilediff/params.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

using nlohmann::json;

inline constexpr char kCkptMagic[8] = {'L', 'F', 'C', 'K', '0', '0', '0', '1'};

inline json to_json(const BackboneConfig& c) {
  return json{{"latent_channels", c.latent_channels}, {"patch", c.patch},         {"hidden", c.hidden},
              {"depth", c.depth},                     {"heads", c.heads},         {"cond_dim", c.cond_dim},
              {"mlp_ratio", c.mlp_ratio},             {"freq_dim", c.freq_dim},   {"max_tokens", c.max_tokens},
              {"cond_token_span", c.cond_token_span}, {"timesteps", c.timesteps}};
}

inline BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.patch = j.value("patch", c.patch);
  c.hidden = j.value("hidden", c.hidden);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.cond_dim = j.value("cond_dim", c.cond_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.freq_dim = j.value("freq_dim", c.freq_dim);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.cond_token_span = j.value("cond_token_span", c.cond_token_span);
  c.timesteps = j.value("timesteps", c.timesteps);
  c.validate();
  return c;
}

struct Checkpoint {
  json header;
  ModelParams<float> params;
};

inline std::string serialize_tensors(const ModelParams<float>& params) {
  std::ostringstream os(std::ios::binary);
  detail::put_u32(os, std::uint32_t(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    detail::put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_lftn(os, t);
  }
  return std::move(os).str();
}

/// Identity of a set of weights: SHA-256 of the serialized tensor section.
inline std::string content_hash(const ModelParams<float>& params) { return sha256_hex(serialize_tensors(params)); }

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  os.write(kCkptMagic, 8);
  const std::string header = ck.header.dump();
  detail::put_u32(os, std::uint32_t(header.size()));
  os.write(header.data(), std::streamsize(header.size()));
  const std::string body = serialize_tensors(ck.params);
  os.write(body.data(), std::streamsize(body.size()));
  return std::move(os).str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const auto bytes = checkpoint_bytes(ck);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint parse_checkpoint(std::istream& in, const std::string& what) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError(what + " is not a checkpoint");
  Checkpoint ck;
  const auto hlen = detail::get_u32(in);
  std::string header(hlen, '\0');
  if (!in.read(header.data(), std::streamsize(hlen))) throw IoError(what + ": truncated header");
  try {
    ck.header = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(what + ": bad header JSON: " + e.what());
  }
  const auto count = detail::get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = detail::get_u32(in);
    std::string name(nlen, '\0');
    if (!in.read(name.data(), std::streamsize(nlen))) throw IoError(what + ": truncated tensor name");
    ck.params.add(name, read_lftn(in));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return parse_checkpoint(in, path);
}

}  // namespace tilediff
