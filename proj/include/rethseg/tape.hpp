#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "rethseg/tensor.hpp"

namespace rethseg {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Tensor<T>& value() const { return tape->value(*this); }
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] std::span<const T> grad() const { return tape->grad(*this); }
};

/// Reverse-mode recorder. Nodes are appended in execution order, so every
/// node's inputs precede it and a single reverse sweep visits each node once.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    value.set_requires_grad(requires_grad);
    nodes_.push_back(Node{std::move(value), {}, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an operation result. The backward rule is kept only when some
  /// input needs a gradient.
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
    bool needs_grad = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var<T>& in : inputs) {
      check_owned(in);
      ids.push_back(in.id);
      needs_grad = needs_grad || nodes_[in.id].value.requires_grad();
    }
    value.set_requires_grad(needs_grad);
    nodes_.push_back(Node{std::move(value), std::move(ids), needs_grad ? std::move(backward) : BackwardFn{}});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  [[nodiscard]] const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  [[nodiscard]] const Tensor<T>& value_at(std::size_t id) const { return nodes_[id].value; }

  [[nodiscard]] std::span<const T> grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value.grad();
  }

  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].value.requires_grad(); }

  /// Accumulation target for input `id`; empty when that input needs no gradient.
  std::span<T> grad_sink(std::size_t id) {
    if (!nodes_[id].value.requires_grad()) return {};
    return nodes_[id].value.mutable_grad();
  }

  [[nodiscard]] std::span<const T> output_grad(std::size_t id) const { return nodes_[id].value.grad(); }

  [[nodiscard]] const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. Leaf
  /// gradients accumulate across calls; intermediate gradients are reset.
  void backward(Var<T> loss) {
    check_owned(loss);
    const Tensor<T>& out = nodes_[loss.id].value;
    if (out.size() != 1) throw ShapeError("backward requires a scalar loss, got shape " + to_string(out.shape()));
    for (Node& node : nodes_) {
      if (node.backward) node.value.clear_grad();
    }
    if (!out.requires_grad()) return;
    nodes_[loss.id].value.mutable_grad()[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || !node.value.has_grad()) continue;
      node.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  void check_owned(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  }

  // deque: references to recorded values stay valid as nodes are appended.
  std::deque<Node> nodes_;
};

}  // namespace rethseg
