#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "recipemind/nn/tensor.hpp"

namespace recipemind::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GradMode { enabled, disabled };

// Records operations in execution order, which is a topological order of the
// computation graph; backward walks it in reverse.
class Tape {
 public:
  // Receives the tape and the node's own index. Reads grad(self) and
  // accumulates into the inputs' gradient slots.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(GradMode mode = GradMode::enabled);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return mode_ == GradMode::enabled; }
  // NaN/Inf in any recorded value raises NumericError. On by default in
  // debug builds.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var constant(Tensor value);
  // Frozen parameters and tapes without gradients yield constants. Repeated
  // calls with the same parameter return the same node.
  Var parameter(const Parameter& p);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t node) const { return nodes_[node].value; }
  bool requires_grad(std::size_t node) const { return nodes_[node].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.index()); }
  // Gradient of the loss w.r.t. this node's output.
  const Tensor& grad(std::size_t node) const { return nodes_[node].grad; }
  // Zero-initialized on first use. Only for nodes that require gradients.
  Tensor& grad_slot(std::size_t node);

  // Runs reverse-mode accumulation from a 1x1 loss. Node gradients are reset
  // first, so calling it twice yields the same node gradients.
  void backward(Var loss);
  // Adds d(loss)/d(p) into p.grad for each parameter recorded on this tape.
  void write_gradients(std::span<Parameter* const> params) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  GradMode mode_;
  bool check_finite_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> parameter_nodes_;
};

// backward + write_gradients: the parameters' grads receive d(loss)/d(param).
void backward(Var loss, std::span<Parameter* const> params);

}  // namespace recipemind::nn
