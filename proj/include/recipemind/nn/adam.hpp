#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "recipemind/nn/tape.hpp"

namespace recipemind::nn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam. Weight decay is decoupled: each step also subtracts
// lr * weight_decay * value. Moments are positional, so the same parameter
// list (in the same order) must be passed to every step.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Updates trainable parameters, then zeroes every gradient.
  void step(std::span<Parameter* const> params);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace recipemind::nn
