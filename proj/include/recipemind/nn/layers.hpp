#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "recipemind/nn/ops.hpp"
#include "recipemind/nn/tape.hpp"
#include "recipemind/random.hpp"

namespace recipemind::nn {

// y = x W + b with W stored in x out. Xavier-uniform weights, zero bias.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, CounterRng& init);

  Var forward(Tape& tape, Var x) const;
  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }
  void collect(std::vector<Parameter*>& out);

  Parameter weight;
  Parameter bias;
};

// Row-wise normalization followed by a learned per-column scale and shift.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t width, double eps);

  Var forward(Tape& tape, Var x) const;
  void collect(std::vector<Parameter*>& out);

  Parameter gain;
  Parameter shift;
  double eps = 1e-5;
};

// Linear layers with ReLU between consecutive layers and none after the last.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t width, std::size_t depth, CounterRng& init);

  Var forward(Tape& tape, Var x) const;
  void collect(std::vector<Parameter*>& out);

  std::vector<Linear> layers;
};

// Query/key/value projections, grouped scaled dot-product attention, and an
// output projection.
class MultiheadAttention {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(const std::string& name, std::size_t width, std::size_t heads, CounterRng& init);

  // query: (groups*nq) x width; keys_values: (groups*nk) x width.
  Var forward(Tape& tape, Var query, Var keys_values, std::size_t groups,
              AttentionWeights* capture = nullptr) const;
  void collect(std::vector<Parameter*>& out);

  std::size_t heads = 1;
  Linear query_proj;
  Linear key_proj;
  Linear value_proj;
  Linear output_proj;
};

// Standalone form: Q, K, V rows of one set, projections included.
Var multihead_attention(Tape& tape, const MultiheadAttention& layer, Var q, Var k, Var v,
                        AttentionWeights* capture = nullptr);

}  // namespace recipemind::nn
