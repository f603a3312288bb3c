#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tilediff/error.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode tape. Nodes are stored in creation order, which is a topological
/// order because every op's inputs already exist when it is recorded. A tape is
/// built fresh for each forward/backward pass and thrown away afterwards.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Records an op result. `fn` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated (zeroed) on first touch.
  std::span<T> grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Accumulated gradient as a tensor; zeros if nothing flowed into the node.
  Tensor<T> gradient(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure once, newest first.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ConfigError("backward called with a Var from another tape");
    if (value(loss).size() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_str(value(loss).shape()));
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, rg, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace tilediff
