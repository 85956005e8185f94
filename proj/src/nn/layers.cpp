#include "recipemind/nn/layers.hpp"

#include <cmath>

namespace recipemind::nn {

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, CounterRng& init) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w(in, out);
  for (double& v : w.data()) v = init.uniform(-bound, bound);
  weight = Parameter(name + ".weight", std::move(w));
  bias = Parameter(name + ".bias", Tensor(1, out));
}

Var Linear::forward(Tape& tape, Var x) const {
  if (x.cols() != in_features()) {
    throw ShapeError(weight.name + ": expected width " + std::to_string(in_features()) + ", got " +
                     std::to_string(x.cols()));
  }
  return add_row(matmul(x, tape.parameter(weight)), tape.parameter(bias));
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, std::size_t width, double eps)
    : gain(name + ".gain", Tensor(1, width, 1.0)), shift(name + ".shift", Tensor(1, width)), eps(eps) {}

Var LayerNorm::forward(Tape& tape, Var x) const {
  return add_row(mul_row(layer_norm(x, eps), tape.parameter(gain)), tape.parameter(shift));
}

void LayerNorm::collect(std::vector<Parameter*>& out) {
  out.push_back(&gain);
  out.push_back(&shift);
}

FeedForward::FeedForward(const std::string& name, std::size_t width, std::size_t depth,
                         CounterRng& init) {
  for (std::size_t i = 0; i < depth; ++i) {
    layers.emplace_back(name + "." + std::to_string(i), width, width, init);
  }
}

Var FeedForward::forward(Tape& tape, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(tape, x);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return x;
}

void FeedForward::collect(std::vector<Parameter*>& out) {
  for (auto& layer : layers) layer.collect(out);
}

MultiheadAttention::MultiheadAttention(const std::string& name, std::size_t width,
                                       std::size_t heads, CounterRng& init)
    : heads(heads),
      query_proj(name + ".query", width, width, init),
      key_proj(name + ".key", width, width, init),
      value_proj(name + ".value", width, width, init),
      output_proj(name + ".output", width, width, init) {
  if (heads == 0 || width % heads != 0) {
    throw ParameterError(name + ": width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
}

Var MultiheadAttention::forward(Tape& tape, Var query, Var keys_values, std::size_t groups,
                                AttentionWeights* capture) const {
  Var q = query_proj.forward(tape, query);
  Var k = key_proj.forward(tape, keys_values);
  Var v = value_proj.forward(tape, keys_values);
  return output_proj.forward(tape, grouped_attention(q, k, v, groups, heads, capture));
}

void MultiheadAttention::collect(std::vector<Parameter*>& out) {
  query_proj.collect(out);
  key_proj.collect(out);
  value_proj.collect(out);
  output_proj.collect(out);
}

Var multihead_attention(Tape& tape, const MultiheadAttention& layer, Var q, Var k, Var v,
                        AttentionWeights* capture) {
  Var qp = layer.query_proj.forward(tape, q);
  Var kp = layer.key_proj.forward(tape, k);
  Var vp = layer.value_proj.forward(tape, v);
  return layer.output_proj.forward(tape, grouped_attention(qp, kp, vp, 1, layer.heads, capture));
}

}  // namespace recipemind::nn
