#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "xattn/tensor.hpp"

namespace xattn {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive and has not been cleared.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Adjoints produced by Tape::backward, indexed by the ids of the vars that
// were on the tape. Vars that received no gradient map to a zero tensor of
// the right shape.
class Gradients {
 public:
  Tensor operator[](const Var& v) const;
  bool has(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> adjoints_;
  std::vector<std::pair<std::size_t, std::size_t>> shapes_;
};

// Reverse-mode gradient tape. Records are appended in forward execution
// order; backward() walks them once in reverse and then clears the tape.
// A tape is not thread-safe; give every job its own.
class Tape {
 public:
  // backward(grad_out, grads): accumulate into grads[input id] for each input.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Records a constant that aliases external storage, which must outlive
  // every use of the tape. Used to bind frozen model weights without copies.
  Var constant_ref(const Tensor& value);

  // Records a derived value. The backward closure is kept only when one of
  // the inputs requires a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Gradients backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor& value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor* ref = nullptr;
  };
  // deque keeps references from Var::value() stable while recording.
  std::deque<Node> nodes_;
};

// Adds g into grads[id], allocating on first use.
void accumulate_grad(std::vector<Tensor>& grads, std::size_t id, const Tensor& g);

}  // namespace xattn
