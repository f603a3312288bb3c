#pragma once

#include <map>
#include <set>
#include <string>

#include "tilediff/error.hpp"
#include "tilediff/hash.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

/// Named parameter store. Names are unique by construction (std::map) and
/// iteration order is lexicographic, which keeps checksums and files stable.
template <class T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  void add(const std::string& name, Tensor<T> value) {
    if (!tensors.emplace(name, std::move(value)).second) throw ConfigError("duplicate parameter '" + name + "'");
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  std::size_t count_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors)
      if (name.rfind(prefix, 0) == 0) n += t.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

/// SHA-256 over names, shapes and payload bytes.
template <class T>
std::string params_checksum(const ModelParams<T>& p, const std::string& prefix = "") {
  Sha256 h;
  for (const auto& [name, t] : p.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    h.update(name).update(shape_str(t.shape()));
    h.update_pod<T>(t.data());
  }
  return h.hex();
}

}  // namespace tilediff
