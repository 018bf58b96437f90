#include "xattn/tape.hpp"

#include "xattn/errors.hpp"

namespace xattn {

const Tensor& Var::value() const {
  if (tape_ == nullptr || id_ >= tape_->size()) {
    throw ContractError("use of a Var whose tape was cleared or never bound");
  }
  return tape_->value_of(id_);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->requires_grad_of(id_); }

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ContractError("scalar() on non-scalar var " + v.shape_string());
  return v[0];
}

Tensor Gradients::operator[](const Var& v) const {
  if (v.id() < adjoints_.size() && !adjoints_[v.id()].empty()) return adjoints_[v.id()];
  if (v.id() < shapes_.size()) return Tensor(shapes_[v.id()].first, shapes_[v.id()].second);
  throw ContractError("var was not recorded on the differentiated tape");
}

bool Gradients::has(const Var& v) const {
  return v.id() < adjoints_.size() && !adjoints_[v.id()].empty();
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const Tensor& value) {
  nodes_.push_back(Node{Tensor{}, false, {}, &value});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError("operands recorded on different tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("loss was not recorded on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + loss.value().shape_string());
  }
  Gradients out;
  out.adjoints_.resize(nodes_.size());
  out.adjoints_[loss.id()] = Tensor(1, 1, 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || out.adjoints_[i].empty()) continue;
    node.backward(out.adjoints_[i], out.adjoints_);
  }
  out.shapes_.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    out.shapes_.emplace_back(value_of(i).rows(), value_of(i).cols());
  }
  clear();
  return out;
}

void accumulate_grad(std::vector<Tensor>& grads, std::size_t id, const Tensor& g) {
  if (grads[id].empty()) {
    grads[id] = g;
  } else {
    grads[id] += g;
  }
}

}  // namespace xattn
