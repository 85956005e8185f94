#pragma once

#include <cstddef>
#include <span>

#include "recipemind/nn/tape.hpp"
#include "recipemind/random.hpp"
#include "recipemind/types.hpp"

namespace recipemind::nn {

Var matmul(Var a, Var b);
// Element-wise sum of equally shaped tensors.
Var add(Var a, Var b);
// x + bias, bias is 1 x cols and is added to every row.
Var add_row(Var x, Var bias);
// x * scale, scale is 1 x cols and multiplies every row element-wise.
Var mul_row(Var x, Var scale);
Var relu(Var x);
// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when not
// training or p == 0. The mask is drawn from `rng`.
Var dropout(Var x, double p, bool training, CounterRng rng);
// Normalizes each row to zero mean and unit population variance.
Var layer_norm(Var x, double eps);
Var softmax_rows(Var x);
Var concat_cols(Var a, Var b);
// Sum over all rows: n x d -> 1 x d.
Var sum_rows(Var x);

// Pooling over consecutive row groups: (groups*size) x d -> groups x d.
Var segment_sum(Var x, std::size_t group_size);
Var segment_mean(Var x, std::size_t group_size);
Var segment_max(Var x, std::size_t group_size);

Var slice_rows(Var x, std::size_t begin, std::size_t end);
// Stacks `times` copies of a 1 x d row.
Var repeat_row(Var row, std::size_t times);
// Row lookup into an embedding table.
Var gather_rows(Var table, std::span<const IngredientId> ids);

// Attention weights captured during a forward pass. Row
// ((group * heads + head) * query_rows + q) holds the softmax over that
// group's key rows.
struct AttentionWeights {
  std::size_t groups = 0;
  std::size_t heads = 0;
  std::size_t query_rows = 0;
  std::size_t key_rows = 0;
  Tensor weights;

  std::span<const double> row(std::size_t group, std::size_t head, std::size_t q) const {
    return weights.row((group * heads + head) * query_rows + q);
  }
};

// Scaled dot-product attention over `groups` independent sets stacked
// row-wise. q is (groups*nq) x d, k and v are (groups*nk) x d; d splits into
// `heads` contiguous column blocks, and each head's output lands in its block.
Var grouped_attention(Var q, Var k, Var v, std::size_t groups, std::size_t heads,
                      AttentionWeights* capture = nullptr);

// sqrt(mean((pred - target)^2)) over a column of predictions; 1 x 1.
Var rmse_loss(Var pred, const Tensor& target);

}  // namespace recipemind::nn
