#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "magd/errors.hpp"
#include "magd/tensor.hpp"

namespace magd::ad {

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
class BasicVar {
 public:
  BasicVar() = default;

  const BasicTensor<T>& value() const {
    if (!tape_) throw UsageError("use of an unbound Var");
    return tape_->value(id_);
  }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_ && tape_->requires_grad(id_); }
  BasicTape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class BasicTape<T>;
  BasicVar(BasicTape<T>* tape, int id) : tape_(tape), id_(id) {}

  BasicTape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Append-only record of one forward pass. Nodes are stored in creation order, which
/// is a valid topological order because every op's inputs already exist. One tape per
/// pass, used from a single thread.
template <class T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  using BackwardFn = std::function<void(BasicTape&, int self)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var leaf(BasicTensor<T> value, bool requires_grad = true) { return make(std::move(value), requires_grad, nullptr); }
  Var constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  /// Records an op result. `fn` is dropped when no input requires a gradient.
  Var record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Var record(BasicTensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
    bool any = false;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw UsageError("op mixes values from different tapes");
      any = any || requires_grad(v.id());
    }
    return make(std::move(value), any, any ? std::move(fn) : BackwardFn{});
  }

  /// Reverse sweep from a scalar loss. Gradients of earlier sweeps are discarded.
  void backward(Var loss) {
    if (loss.tape() != this) throw UsageError("loss belongs to a different tape");
    if (loss.value().size() != 1) {
      throw UsageError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    visits_ = 0;
    if (!requires_grad(loss.id())) return;
    grad_buffer(loss.id())[0] = T(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty() || !n.backward) continue;
      ++visits_;
      n.backward(*this, id);
    }
  }

  /// Gradient from the last backward() w.r.t. `v`; zeros when `v` is not on a path to the loss.
  BasicTensor<T> grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.empty()) return BasicTensor<T>(n.value.shape(), T(0));
    return BasicTensor<T>(n.value.shape(), n.grad);
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  const BasicTensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // For use inside backward functions.
  std::span<const T> out_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  std::span<T> grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

 private:
  struct Node {
    BasicTensor<T> value;
    std::vector<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var make(BasicTensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;  // stable references across appends
  std::size_t visits_ = 0;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;
using Tape64 = BasicTape<double>;
using Var64 = BasicVar<double>;

}  // namespace magd::ad
