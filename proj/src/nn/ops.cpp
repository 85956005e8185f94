#include "recipemind/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace recipemind::nn {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void require_row_vector(const Var& row, std::size_t cols, const char* op) {
  require(row.rows() == 1 && row.cols() == cols,
          std::string(op) + ": expected 1x" + std::to_string(cols) + " row, got " +
              row.value().shape_string());
}

std::size_t check_groups(const Var& x, std::size_t group_size, const char* op) {
  require(group_size > 0 && x.rows() % group_size == 0,
          std::string(op) + ": " + std::to_string(x.rows()) + " rows do not split into groups of " +
              std::to_string(group_size));
  return x.rows() / group_size;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out;
  gemm(a.value(), false, b.value(), false, out, false);
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) gemm(g, false, t.value(ib), true, t.grad_slot(ia), true);
    if (t.requires_grad(ib)) gemm(t.value(ia), true, g, false, t.grad_slot(ib), true);
  });
}

Var add(Var a, Var b) {
  require(a.value().same_shape(b.value()),
          "add: shape mismatch " + a.value().shape_string() + " vs " + b.value().shape_string());
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    if (t.requires_grad(ia)) t.grad_slot(ia) += t.grad(self);
    if (t.requires_grad(ib)) t.grad_slot(ib) += t.grad(self);
  });
}

Var add_row(Var x, Var bias) {
  require_row_vector(bias, x.cols(), "add_row");
  Tensor out = x.value();
  const auto b = bias.value().row(0);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  const std::size_t ix = x.index(), ib = bias.index();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) t.grad_slot(ix) += g;
    if (t.requires_grad(ib)) {
      auto gb = t.grad_slot(ib).row(0);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var mul_row(Var x, Var scale) {
  require_row_vector(scale, x.cols(), "mul_row");
  Tensor out = x.value();
  const auto s = scale.value().row(0);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] *= s[c];
  }
  const std::size_t ix = x.index(), is = scale.index();
  return x.tape().record(std::move(out), {x, scale}, [ix, is](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const auto sv = t.value(is).row(0);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_slot(ix);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) += g(r, c) * sv[c];
      }
    }
    if (t.requires_grad(is)) {
      auto gs = t.grad_slot(is).row(0);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gs[c] += g(r, c) * xv(r, c);
      }
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var dropout(Var x, double p, bool training, CounterRng rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(x.rows(), x.cols());
  for (double& m : mask.data()) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var layer_norm(Var x, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  require(n > 0, "layer_norm: empty rows");
  Tensor out(xv.rows(), n);
  std::vector<double> inv_std(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) o[c] = (row[c] - mean) * inv_std[r];
  }
  const std::size_t ix = x.index();
  Tensor normalized = out;
  return x.tape().record(
      std::move(out), {x},
      [ix, n, inv_std = std::move(inv_std), normalized = std::move(normalized)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_slot(ix);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const auto gr = g.row(r);
          const auto xh = normalized.row(r);
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            mean_g += gr[c];
            mean_gx += gr[c] * xh[c];
          }
          mean_g /= static_cast<double>(n);
          mean_gx /= static_cast<double>(n);
          auto out_row = gx.row(r);
          for (std::size_t c = 0; c < n; ++c) {
            out_row[c] += inv_std[r] * (gr[c] - mean_g - xh[c] * mean_gx);
          }
        }
      });
}

namespace {

void softmax_in_place(std::span<double> row) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : row) m = std::max(m, v);
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

// dx = y * (dy - <dy, y>) for one softmax row.
void softmax_backward_row(std::span<const double> y, std::span<const double> dy, std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c) dot += dy[c] * y[c];
  for (std::size_t c = 0; c < y.size(); ++c) dx[c] += y[c] * (dy[c] - dot);
}

}  // namespace

Var softmax_rows(Var x) {
  Tensor out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_in_place(out.row(r));
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) softmax_backward_row(y.row(r), g.row(r), gx.row(r));
  });
}

Var concat_cols(Var a, Var b) {
  require(a.rows() == b.rows(), "concat_cols: row counts differ");
  const std::size_t ca = a.cols(), cb = b.cols();
  Tensor out(a.rows(), ca + cb);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    std::copy_n(a.value().row(r).begin(), ca, out.row(r).begin());
    std::copy_n(b.value().row(r).begin(), cb, out.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto gr = g.row(r);
      if (t.requires_grad(ia)) {
        auto dst = t.grad_slot(ia).row(r);
        for (std::size_t c = 0; c < ca; ++c) dst[c] += gr[c];
      }
      if (t.requires_grad(ib)) {
        auto dst = t.grad_slot(ib).row(r);
        for (std::size_t c = 0; c < cb; ++c) dst[c] += gr[ca + c];
      }
    }
  });
}

Var sum_rows(Var x) {
  require(x.rows() > 0, "sum_rows: empty input");
  return segment_sum(x, x.rows());
}

Var segment_sum(Var x, std::size_t group_size) {
  const std::size_t groups = check_groups(x, group_size, "segment_sum");
  const Tensor& xv = x.value();
  Tensor out(groups, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto dst = out.row(r / group_size);
    const auto src = xv.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix, group_size](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      auto dst = gx.row(r);
      const auto src = g.row(r / group_size);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var segment_mean(Var x, std::size_t group_size) {
  const std::size_t groups = check_groups(x, group_size, "segment_mean");
  const Tensor& xv = x.value();
  const double inv = 1.0 / static_cast<double>(group_size);
  Tensor out(groups, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto dst = out.row(r / group_size);
    const auto src = xv.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * inv;
  }
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix, group_size, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      auto dst = gx.row(r);
      const auto src = g.row(r / group_size);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * inv;
    }
  });
}

Var segment_max(Var x, std::size_t group_size) {
  const std::size_t groups = check_groups(x, group_size, "segment_max");
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor out(groups, cols);
  std::vector<std::size_t> argmax(groups * cols);
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t best = gidx * group_size;
      for (std::size_t r = best + 1; r < (gidx + 1) * group_size; ++r) {
        if (xv(r, c) > xv(best, c)) best = r;
      }
      argmax[gidx * cols + c] = best;
      out(gidx, c) = xv(best, c);
    }
  }
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix, cols, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < argmax.size(); ++i) gx(argmax[i], i % cols) += g[i];
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tensor out = x.value().slice_rows(begin, end);
  const std::size_t ix = x.index();
  return x.tape().record(std::move(out), {x}, [ix, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto dst = gx.row(begin + r);
      const auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var repeat_row(Var row, std::size_t times) {
  require(row.rows() == 1, "repeat_row: expected a single row");
  Tensor out(times, row.cols());
  for (std::size_t r = 0; r < times; ++r) {
    std::copy(row.value().row(0).begin(), row.value().row(0).end(), out.row(r).begin());
  }
  const std::size_t ix = row.index();
  return row.tape().record(std::move(out), {row}, [ix](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto dst = t.grad_slot(ix).row(0);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var gather_rows(Var table, std::span<const IngredientId> ids) {
  const Tensor& tv = table.value();
  Tensor out(ids.size(), tv.cols());
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DataError("embedding lookup: id " + std::to_string(ids[i]) + " out of range");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy(tv.row(rows[i]).begin(), tv.row(rows[i]).end(), out.row(i).begin());
  }
  const std::size_t it = table.index();
  return table.tape().record(std::move(out), {table}, [it, rows = std::move(rows)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad_slot(it);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto dst = gt.row(rows[i]);
      const auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var grouped_attention(Var q, Var k, Var v, std::size_t groups, std::size_t heads,
                      AttentionWeights* capture) {
  const std::size_t d = q.cols();
  require(heads > 0 && d % heads == 0, "attention: width " + std::to_string(d) +
                                           " is not divisible by " + std::to_string(heads) + " heads");
  require(k.cols() == d && v.cols() == d, "attention: q, k, v widths differ");
  require(k.rows() == v.rows(), "attention: k and v row counts differ");
  require(groups > 0 && q.rows() % groups == 0 && k.rows() % groups == 0,
          "attention: rows do not split into groups");
  const std::size_t nq = q.rows() / groups;
  const std::size_t nk = k.rows() / groups;
  require(nk > 0, "attention: empty key set");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  Tensor weights(groups * heads * nq, nk);
  Tensor out(q.rows(), d);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < nq; ++i) {
        auto w = weights.row((g * heads + h) * nq + i);
        const auto qi = qv.row(g * nq + i);
        for (std::size_t j = 0; j < nk; ++j) {
          const auto kj = kv.row(g * nk + j);
          double s = 0.0;
          for (std::size_t c = c0; c < c0 + dh; ++c) s += qi[c] * kj[c];
          w[j] = s * scale;
        }
        softmax_in_place(w);
        auto o = out.row(g * nq + i);
        for (std::size_t j = 0; j < nk; ++j) {
          const auto vj = vv.row(g * nk + j);
          for (std::size_t c = c0; c < c0 + dh; ++c) o[c] += w[j] * vj[c];
        }
      }
    }
  }
  if (capture) *capture = AttentionWeights{groups, heads, nq, nk, weights};

  const std::size_t iq = q.index(), ik = k.index(), iv = v.index();
  return q.tape().record(
      std::move(out), {q, k, v},
      [=, weights = std::move(weights)](Tape& t, std::size_t self) {
        const Tensor& go = t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        const bool need_q = t.requires_grad(iq);
        const bool need_k = t.requires_grad(ik);
        const bool need_v = t.requires_grad(iv);
        Tensor* gq = need_q ? &t.grad_slot(iq) : nullptr;
        Tensor* gk = need_k ? &t.grad_slot(ik) : nullptr;
        Tensor* gv = need_v ? &t.grad_slot(iv) : nullptr;
        std::vector<double> dw(nk), ds(nk);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < nq; ++i) {
              const auto w = weights.row((g * heads + h) * nq + i);
              const auto goi = go.row(g * nq + i);
              for (std::size_t j = 0; j < nk; ++j) {
                const auto vj = vv.row(g * nk + j);
                double s = 0.0;
                for (std::size_t c = c0; c < c0 + dh; ++c) s += goi[c] * vj[c];
                dw[j] = s;
                if (gv) {
                  auto dst = gv->row(g * nk + j);
                  for (std::size_t c = c0; c < c0 + dh; ++c) dst[c] += w[j] * goi[c];
                }
              }
              std::fill(ds.begin(), ds.end(), 0.0);
              softmax_backward_row(w, dw, ds);
              const auto qi = qv.row(g * nq + i);
              for (std::size_t j = 0; j < nk; ++j) {
                const double coef = ds[j] * scale;
                if (coef == 0.0) continue;
                const auto kj = kv.row(g * nk + j);
                if (gq) {
                  auto dst = gq->row(g * nq + i);
                  for (std::size_t c = c0; c < c0 + dh; ++c) dst[c] += coef * kj[c];
                }
                if (gk) {
                  auto dst = gk->row(g * nk + j);
                  for (std::size_t c = c0; c < c0 + dh; ++c) dst[c] += coef * qi[c];
                }
              }
            }
          }
        }
      });
}

Var rmse_loss(Var pred, const Tensor& target) {
  require(pred.cols() == 1 && target.cols() == 1 && pred.rows() == target.rows() && pred.rows() > 0,
          "rmse_loss: expected matching n x 1 columns");
  const Tensor& p = pred.value();
  double ss = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const double diff = p[i] - target[i];
    ss += diff * diff;
  }
  const double n = static_cast<double>(p.rows());
  const double value = std::sqrt(ss / n);
  const std::size_t ip = pred.index();
  return pred.tape().record(Tensor(1, 1, value), {pred}, [ip, target, value, n](Tape& t, std::size_t self) {
    if (value == 0.0) return;
    const double g = t.grad(self)[0];
    const Tensor& p = t.value(ip);
    Tensor& gp = t.grad_slot(ip);
    for (std::size_t i = 0; i < p.rows(); ++i) gp[i] += g * (p[i] - target[i]) / (n * value);
  });
}

}  // namespace recipemind::nn
