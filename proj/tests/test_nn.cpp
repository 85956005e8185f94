#include <doctest.h>

#include <cmath>
#include <random>

#include "recipemind/nn/adam.hpp"
#include "recipemind/nn/layers.hpp"
#include "recipemind/nn/ops.hpp"
#include "recipemind/nn/tape.hpp"
#include "test_support.hpp"

using namespace recipemind;
using namespace recipemind::nn;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(rows, cols);
  for (auto& x : t.data()) x = d(rng);
  return t;
}

// Reduces a matrix to a scalar through fixed random weights so that every
// output entry carries a distinct gradient.
struct Reducer {
  Tensor weights;
  Var operator()(Tape& tape, Var x) const {
    return sum_rows(matmul(x, tape.constant(weights)));
  }
};

Reducer reducer(std::size_t cols, std::mt19937_64& rng) { return {random_tensor(cols, 1, rng)}; }

void expect_gradients_match(std::vector<Parameter*> params, const std::function<Var(Tape&)>& loss) {
  auto result = testing_support::check_gradients(params, loss);
  INFO("worst: " << result.worst_parameter << " rel err " << result.max_relative_error);
  CHECK(result.checked > 0);
  CHECK(result.max_relative_error <= 1e-4);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t{{1, 2}, {3, 4}};
  CHECK(t.rows() == 2);
  CHECK(t(1, 0) == 3);
  CHECK(t.slice_rows(1, 2) == Tensor{{3, 4}});
  CHECK_THROWS_AS(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS((Tensor{{1, 2}, {3}}), ShapeError);
  CHECK(matmul(t, Tensor{{1}, {1}}) == Tensor{{3}, {7}});
  CHECK_THROWS_AS(matmul(t, Tensor{{1, 1}}), ShapeError);
}

TEST_CASE("forward primitives on hand examples") {
  Tape tape;
  SUBCASE("matmul") {
    auto y = matmul(tape.constant({{1, 2}, {3, 4}}), tape.constant({{1}, {1}}));
    CHECK(y.value() == Tensor{{3}, {7}});
  }
  SUBCASE("softmax of equal logits") {
    auto y = softmax_rows(tape.constant({{0, 0}}));
    CHECK(y.value() == Tensor{{0.5, 0.5}});
  }
  SUBCASE("softmax rows sum to one and survive large logits") {
    std::mt19937_64 rng(1);
    auto x = random_tensor(20, 9, rng, 30.0);
    x(0, 0) = 800.0;
    auto y = softmax_rows(tape.constant(x)).value();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0;
      for (double v : y.row(r)) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("layer norm of [1, 3]") {
    auto y = layer_norm(tape.constant({{1, 3}}), 1e-5).value();
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y(0, 0) == doctest::Approx(-expected).epsilon(1e-14));
    CHECK(y(0, 1) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(std::abs(y(0, 1) - 1.0) < 1e-5);
  }
  SUBCASE("layer norm rows have zero mean and unit variance") {
    std::mt19937_64 rng(2);
    auto y = layer_norm(tape.constant(random_tensor(15, 32, rng, 5.0)), 1e-5).value();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double m = 0, v = 0;
      for (double x : y.row(r)) m += x;
      m /= 32;
      for (double x : y.row(r)) v += (x - m) * (x - m);
      v /= 32;
      CHECK(std::abs(m) <= 1e-10);
      CHECK(std::abs(v - 1.0) <= 1e-6);
    }
  }
  SUBCASE("concat, sums and pooling") {
    auto a = tape.constant({{1, 2}, {3, 4}});
    auto b = tape.constant({{5}, {6}});
    CHECK(concat_cols(a, b).value() == Tensor{{1, 2, 5}, {3, 4, 6}});
    CHECK(sum_rows(a).value() == Tensor{{4, 6}});
    auto x = tape.constant({{1, 5}, {3, 2}, {-1, 0}, {4, -2}});
    CHECK(segment_sum(x, 2).value() == Tensor{{4, 7}, {3, -2}});
    CHECK(segment_mean(x, 2).value() == Tensor{{2, 3.5}, {1.5, -1}});
    CHECK(segment_max(x, 2).value() == Tensor{{3, 5}, {4, 0}});
    CHECK(repeat_row(tape.constant({{1, 2}}), 3).value() == Tensor{{1, 2}, {1, 2}, {1, 2}});
    std::vector<IngredientId> ids = {2, 0, 2};
    CHECK(gather_rows(tape.constant({{0, 1}, {2, 3}, {4, 5}}), ids).value() == Tensor{{4, 5}, {0, 1}, {4, 5}});
  }
  SUBCASE("shape errors") {
    auto a = tape.constant({{1, 2}});
    CHECK_THROWS_AS(add(a, tape.constant({{1}})), ShapeError);
    CHECK_THROWS_AS(concat_cols(a, tape.constant({{1}, {2}})), ShapeError);
    CHECK_THROWS_AS(segment_sum(tape.constant(Tensor(3, 2)), 2), ShapeError);
    std::vector<IngredientId> bad = {5};
    CHECK_THROWS_AS(gather_rows(tape.constant(Tensor(2, 2)), bad), DataError);
  }
}

TEST_CASE("dropout") {
  Tape tape;
  std::mt19937_64 rng(4);
  auto x = tape.constant(random_tensor(10, 10, rng));
  CHECK(dropout(x, 0.3, false, CounterRng(1)).value() == x.value());
  CHECK(dropout(x, 0.0, true, CounterRng(1)).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, true, CounterRng(1)), ParameterError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, CounterRng(1)), ParameterError);

  auto a = dropout(x, 0.3, true, CounterRng(9, 2)).value();
  auto b = dropout(x, 0.3, true, CounterRng(9, 2)).value();
  CHECK(a == b);

  auto big = tape.constant(Tensor(1, 100000, 2.0));
  auto y = dropout(big, 0.3, true, CounterRng(12345)).value();
  double mean = 0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || std::abs(v - 2.0 / 0.7) < 1e-12));
    mean += v;
  }
  mean /= 100000.0;
  CHECK(std::abs(mean - 2.0) <= 2e-2);
}

TEST_CASE("multihead attention trivial cases") {
  CounterRng init(3);
  MultiheadAttention mha("mha", 4, 2, init);
  Tape tape;
  std::mt19937_64 rng(6);
  SUBCASE("single key gets weight one") {
    auto q = tape.constant(random_tensor(1, 4, rng));
    auto kv = tape.constant(random_tensor(1, 4, rng));
    AttentionWeights w;
    auto out = multihead_attention(tape, mha, q, kv, kv, &w);
    for (std::size_t h = 0; h < 2; ++h) CHECK(w.row(0, h, 0)[0] == 1.0);
    // Output equals the value projection of the key row through the output projection.
    auto expected = mha.output_proj.forward(tape, mha.value_proj.forward(tape, kv));
    CHECK(max_abs_diff(out.value(), expected.value()) <= 1e-12);
  }
  SUBCASE("zero logits give uniform weights") {
    Tape t2;
    auto q = t2.constant(Tensor(2, 4, 1.0));
    auto k = t2.constant(random_tensor(3, 4, rng));
    auto v = t2.constant(random_tensor(3, 4, rng));
    AttentionWeights w;
    grouped_attention(t2.constant(Tensor(2, 4, 0.0)), k, v, 1, 2, &w);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t r = 0; r < 2; ++r)
        for (double x : w.row(0, h, r)) CHECK(std::abs(x - 1.0 / 3.0) <= 1e-15);
    (void)q;
  }
  SUBCASE("weights rows sum to one") {
    AttentionWeights w;
    grouped_attention(tape.constant(random_tensor(6, 4, rng)), tape.constant(random_tensor(9, 4, rng)),
                      tape.constant(random_tensor(9, 4, rng)), 3, 2, &w);
    CHECK(w.groups == 3);
    CHECK(w.key_rows == 3);
    for (std::size_t r = 0; r < w.weights.rows(); ++r) {
      double s = 0;
      for (double x : w.weights.row(r)) s += x;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("width must split into heads") {
    CounterRng init2(1);
    CHECK_THROWS_AS(MultiheadAttention("bad", 5, 2, init2), ParameterError);
  }
}

TEST_CASE("multihead attention matches a scalar evaluation with d=2, one head") {
  CounterRng init(3);
  MultiheadAttention mha("mha", 2, 1, init);
  const double wq[2][2] = {{1.0, 0.5}, {-0.5, 2.0}};
  const double wk[2][2] = {{0.3, -1.0}, {0.8, 0.2}};
  const double wv[2][2] = {{1.5, 0.0}, {-1.0, 1.0}};
  const double wo[2][2] = {{0.7, 0.1}, {0.2, -0.4}};
  auto assign = [](Linear& l, const double w[2][2], double b0, double b1) {
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) l.weight.value(i, j) = w[i][j];
    l.bias.value(0, 0) = b0;
    l.bias.value(0, 1) = b1;
  };
  assign(mha.query_proj, wq, 0.1, 0.0);
  assign(mha.key_proj, wk, 0.0, -0.2);
  assign(mha.value_proj, wv, 0.05, 0.0);
  assign(mha.output_proj, wo, 0.0, 0.3);
  const double q_in[2][2] = {{1.0, 2.0}, {-1.0, 0.5}};
  const double kv_in[2][2] = {{0.5, -1.0}, {2.0, 1.0}};

  auto project = [](const double x[2], const double w[2][2], double b0, double b1, double out[2]) {
    out[0] = x[0] * w[0][0] + x[1] * w[1][0] + b0;
    out[1] = x[0] * w[0][1] + x[1] * w[1][1] + b1;
  };
  double k[2][2], v[2][2];
  for (int j = 0; j < 2; ++j) {
    project(kv_in[j], wk, 0.0, -0.2, k[j]);
    project(kv_in[j], wv, 0.05, 0.0, v[j]);
  }
  double expected[2][2];
  for (int i = 0; i < 2; ++i) {
    double q[2];
    project(q_in[i], wq, 0.1, 0.0, q);
    const double l0 = (q[0] * k[0][0] + q[1] * k[0][1]) / std::sqrt(2.0);
    const double l1 = (q[0] * k[1][0] + q[1] * k[1][1]) / std::sqrt(2.0);
    const double e0 = std::exp(l0), e1 = std::exp(l1);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    const double mixed[2] = {a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]};
    project(mixed, wo, 0.0, 0.3, expected[i]);
  }

  Tape tape;
  auto q = tape.constant({{1.0, 2.0}, {-1.0, 0.5}});
  auto kv = tape.constant({{0.5, -1.0}, {2.0, 1.0}});
  auto out = multihead_attention(tape, mha, q, kv, kv).value();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(out(i, j) == doctest::Approx(expected[i][j]).epsilon(1e-12));
}

TEST_CASE("backward basics") {
  Parameter w("w", Tensor{{2.0}});
  {
    Tape tape;
    auto loss = matmul(tape.parameter(w), tape.constant({{3.0}}));
    std::vector<Parameter*> ps = {&w};
    backward(loss, ps);
  }
  CHECK(w.grad[0] == 3.0);
  {
    // Without zeroing, a second pass accumulates.
    Tape tape;
    auto loss = matmul(tape.parameter(w), tape.constant({{3.0}}));
    std::vector<Parameter*> ps = {&w};
    backward(loss, ps);
  }
  CHECK(w.grad[0] == 6.0);

  Parameter unused("unused", Tensor{{1.0, 2.0}});
  w.zero_grad();
  {
    Tape tape;
    auto loss = matmul(tape.parameter(w), tape.constant({{3.0}}));
    std::vector<Parameter*> ps = {&w, &unused};
    backward(loss, ps);
  }
  CHECK(unused.grad == Tensor{{0.0, 0.0}});

  Tape tape;
  CHECK_THROWS_AS(tape.backward(tape.constant({{1.0, 2.0}})), ShapeError);
}

TEST_CASE("fan-out accumulates gradients") {
  Parameter x("x", Tensor{{1.5, -2.0}});
  std::vector<Parameter*> ps = {&x};
  {
    Tape tape;
    auto v = tape.parameter(x);
    auto loss = sum_rows(matmul(add(v, v), tape.constant({{1.0}, {1.0}})));
    backward(loss, ps);
  }
  CHECK(x.grad == Tensor{{2.0, 2.0}});
}

TEST_CASE("non-finite values are caught when checking is enabled") {
  Tape tape;
  tape.set_check_finite(true);
  auto inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(tape.constant(Tensor{{inf}}), NumericError);
}

TEST_CASE("per-op gradient checks") {
  std::mt19937_64 rng(42);
  Parameter a("a", random_tensor(4, 3, rng));
  Parameter b("b", random_tensor(3, 5, rng));
  Parameter c("c", random_tensor(4, 3, rng));
  Parameter row("row", random_tensor(1, 3, rng));
  auto r3 = reducer(3, rng);
  auto r5 = reducer(5, rng);
  auto r6 = reducer(6, rng);

  SUBCASE("matmul") {
    expect_gradients_match({&a, &b}, [&](Tape& t) { return r5(t, matmul(t.parameter(a), t.parameter(b))); });
  }
  SUBCASE("add, add_row, mul_row") {
    expect_gradients_match({&a, &c, &row}, [&](Tape& t) {
      auto x = add(t.parameter(a), t.parameter(c));
      return r3(t, mul_row(add_row(x, t.parameter(row)), t.parameter(row)));
    });
  }
  SUBCASE("relu") {
    expect_gradients_match({&a}, [&](Tape& t) { return r3(t, relu(t.parameter(a))); });
  }
  SUBCASE("dropout in training") {
    expect_gradients_match({&a}, [&](Tape& t) { return r3(t, dropout(t.parameter(a), 0.4, true, CounterRng(5))); });
  }
  SUBCASE("layer norm") {
    expect_gradients_match({&a}, [&](Tape& t) { return r3(t, layer_norm(t.parameter(a), 1e-5)); });
  }
  SUBCASE("softmax") {
    expect_gradients_match({&a}, [&](Tape& t) { return r3(t, softmax_rows(t.parameter(a))); });
  }
  SUBCASE("concat and sum") {
    expect_gradients_match({&a, &c}, [&](Tape& t) {
      return r6(t, sum_rows(concat_cols(t.parameter(a), t.parameter(c))));
    });
  }
  SUBCASE("segment pooling") {
    expect_gradients_match({&a}, [&](Tape& t) {
      auto x = t.parameter(a);
      return add(add(r3(t, segment_sum(x, 2)), r3(t, segment_mean(x, 2))), r3(t, segment_max(x, 2)));
    });
  }
  SUBCASE("slice, repeat and gather") {
    std::vector<IngredientId> ids = {3, 1, 3, 0};
    expect_gradients_match({&a, &row}, [&](Tape& t) {
      auto x = add(gather_rows(t.parameter(a), ids), repeat_row(t.parameter(row), 4));
      return r3(t, slice_rows(x, 1, 4));
    });
  }
  SUBCASE("grouped attention") {
    Parameter q("q", random_tensor(4, 6, rng));
    Parameter k("k", random_tensor(6, 6, rng));
    Parameter v("v", random_tensor(6, 6, rng));
    expect_gradients_match({&q, &k, &v}, [&](Tape& t) {
      return r6(t, grouped_attention(t.parameter(q), t.parameter(k), t.parameter(v), 2, 3));
    });
  }
  SUBCASE("rmse loss") {
    Parameter pred("pred", random_tensor(5, 1, rng));
    Tensor target = random_tensor(5, 1, rng);
    expect_gradients_match({&pred}, [&](Tape& t) { return rmse_loss(t.parameter(pred), target); });
  }
}

TEST_CASE("layer gradient checks") {
  std::mt19937_64 rng(7);
  CounterRng init(11);
  Tensor x = random_tensor(6, 4, rng);
  auto r4 = reducer(4, rng);

  SUBCASE("linear") {
    Linear l("lin", 4, 4, init);
    std::vector<Parameter*> ps;
    l.collect(ps);
    expect_gradients_match(ps, [&](Tape& t) { return r4(t, l.forward(t, t.constant(x))); });
  }
  SUBCASE("layer norm with affine terms") {
    LayerNorm ln("ln", 4, 1e-5);
    ln.gain.value = random_tensor(1, 4, rng);
    ln.shift.value = random_tensor(1, 4, rng);
    std::vector<Parameter*> ps;
    ln.collect(ps);
    expect_gradients_match(ps, [&](Tape& t) { return r4(t, ln.forward(t, t.constant(x))); });
  }
  SUBCASE("feed forward") {
    FeedForward ff("ff", 4, 3, init);
    std::vector<Parameter*> ps;
    ff.collect(ps);
    expect_gradients_match(ps, [&](Tape& t) { return r4(t, ff.forward(t, t.constant(x))); });
  }
  SUBCASE("multihead attention") {
    MultiheadAttention mha("mha", 4, 2, init);
    std::vector<Parameter*> ps;
    mha.collect(ps);
    Tensor kv = random_tensor(9, 4, rng);
    expect_gradients_match(ps, [&](Tape& t) {
      return r4(t, mha.forward(t, t.constant(x), t.constant(kv), 3));
    });
  }
}

TEST_CASE("rmse loss with exact predictions has zero gradient") {
  Parameter pred("pred", Tensor{{1.0}, {2.0}});
  std::vector<Parameter*> ps = {&pred};
  Tape tape;
  auto loss = rmse_loss(tape.parameter(pred), Tensor{{1.0}, {2.0}});
  CHECK(loss.value()[0] == 0.0);
  backward(loss, ps);
  CHECK(pred.grad == Tensor{{0.0}, {0.0}});
}

TEST_CASE("adam") {
  SUBCASE("first step from zero") {
    Parameter w("w", Tensor{{0.0}});
    w.grad[0] = 1.0;
    Adam opt({.learning_rate = 0.1, .weight_decay = 0.0});
    std::vector<Parameter*> ps = {&w};
    opt.step(ps);
    CHECK(std::abs(w.value[0] - (-0.09999999)) <= 1e-8);
    CHECK(w.value[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(w.grad[0] == 0.0);
    CHECK(opt.steps() == 1);
  }
  SUBCASE("zero gradient without decay leaves parameters unchanged") {
    Parameter w("w", Tensor{{0.7, -0.3}});
    Adam opt({.learning_rate = 0.1, .weight_decay = 0.0});
    std::vector<Parameter*> ps = {&w};
    for (int i = 0; i < 3; ++i) opt.step(ps);
    CHECK(w.value == Tensor{{0.7, -0.3}});
  }
  SUBCASE("frozen parameters are untouched") {
    Parameter w("w", Tensor{{0.5}}, false);
    w.grad[0] = 1.0;
    Adam opt;
    std::vector<Parameter*> ps = {&w};
    opt.step(ps);
    CHECK(w.value[0] == 0.5);
    CHECK(w.grad[0] == 0.0);
  }
  SUBCASE("identical runs are bit-identical") {
    auto run = [] {
      std::mt19937_64 rng(1);
      Parameter w("w", random_tensor(3, 3, rng));
      Adam opt({.learning_rate = 0.01, .weight_decay = 0.1});
      std::vector<Parameter*> ps = {&w};
      for (int i = 0; i < 20; ++i) {
        for (std::size_t j = 0; j < w.value.size(); ++j) w.grad[j] = std::sin(w.value[j] + i);
        opt.step(ps);
      }
      return w.value;
    };
    CHECK(run() == run());
  }
}
