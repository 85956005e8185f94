#include "recipemind/nn/tape.hpp"

namespace recipemind::nn {

Parameter::Parameter(std::string name, Tensor value, bool trainable)
    : name(std::move(name)), value(std::move(value)), trainable(trainable) {
  grad = Tensor(this->value.rows(), this->value.cols());
}

const Tensor& Var::value() const { return tape_->value(index_); }

Tape::Tape(GradMode mode) : mode_(mode) {
#ifdef NDEBUG
  check_finite_ = false;
#else
  check_finite_ = true;
#endif
}

Var Tape::constant(Tensor value) {
  if (check_finite_ && !value.all_finite()) throw NumericError("non-finite constant");
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = parameter_nodes_.find(&p); it != parameter_nodes_.end()) {
    return Var(this, it->second);
  }
  if (check_finite_ && !p.value.all_finite()) {
    throw NumericError("non-finite values in parameter " + p.name);
  }
  nodes_.push_back(Node{p.value, {}, {}, grad_enabled() && p.trainable});
  parameter_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
  }
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::logic_error("mixing variables from different tapes");
      needs = needs || nodes_[in.index()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(std::size_t node) {
  Node& n = nodes_[node];
  if (!n.requires_grad) throw std::logic_error("gradient requested for a constant node");
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("loss belongs to another tape");
  const Tensor& lv = value(loss.index());
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + lv.shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.index()].requires_grad) return;
  grad_slot(loss.index())[0] = 1.0;
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::write_gradients(std::span<Parameter* const> params) const {
  for (Parameter* p : params) {
    auto it = parameter_nodes_.find(p);
    if (it == parameter_nodes_.end()) continue;
    const Node& n = nodes_[it->second];
    if (!n.requires_grad || n.grad.empty()) continue;
    p->grad += n.grad;
  }
}

void backward(Var loss, std::span<Parameter* const> params) {
  loss.tape().backward(loss);
  loss.tape().write_gradients(params);
}

}  // namespace recipemind::nn
