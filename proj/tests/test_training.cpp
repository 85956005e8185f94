#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "recipemind/synthetic.hpp"
#include "recipemind/training.hpp"

using namespace recipemind;

namespace {

ModelConfig toy_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 8;
  c.hidden_dim = 8;
  c.heads = 2;
  c.num_blocks = 1;
  c.rff_depth = 2;
  return c;
}

struct Fixture {
  IngredientVocabulary vocab;
  DatasetSplit split;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    auto recipes = generate_planted_corpus({.recipes = 300, .ingredients = 20, .clusters = 4, .seed = 5});
    Fixture out;
    out.vocab = build_vocabulary(recipes, 0);
    auto counter = count_subsets(recipes, out.vocab, {7, 3, 1});
    auto built = build_instances(counter);
    std::vector<AffinityInstance> all = built.trainable;
    for (const auto& [n, g] : built.test_only) all.insert(all.end(), g.begin(), g.end());
    out.split = split_by_subset(all, {}, 3);
    return out;
  }();
  return f;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.learning_rate = 3e-3;
  t.batch_size = 32;
  t.max_epochs = epochs;
  t.patience = epochs;
  t.seed = 9;
  return t;
}

std::vector<AffinityInstance> with_scores(const std::vector<double>& scores) {
  std::vector<AffinityInstance> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({{0}, static_cast<IngredientId>(i + 1), scores[i]});
  return out;
}

class FixedPredictor : public Predictor {
 public:
  explicit FixedPredictor(std::vector<double> values) : values_(std::move(values)) {}
  std::string name() const override { return "fixed"; }
  std::vector<double> predict(std::span<const AffinityInstance>) const override { return values_; }

 private:
  std::vector<double> values_;
};

}  // namespace

TEST_CASE("train config validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  TrainConfig t;
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = {};
  // Patience beyond the epoch budget just never triggers.
  t.patience = 31;
  CHECK_NOTHROW(t.validate());
  t.max_epochs = 0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = {};
  t.learning_rate = 0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = {};
  t.max_epochs = 5;
  t.patience = 2;
  CHECK(TrainConfig::from_json(t.to_json()).to_json() == t.to_json());
}

TEST_CASE("patience zero runs exactly one epoch") {
  const auto& f = fixture();
  RecipeMind model(toy_model(f.vocab.size()), 1);
  TrainConfig t = quick(5);
  t.patience = 0;
  auto result = train(model, f.split.train, f.split.validation, t);
  CHECK(result.history.size() == 1);
  CHECK(result.best_epoch == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto& f = fixture();
  auto run = [&] {
    RecipeMind model(toy_model(f.vocab.size()), 4);
    return train(model, f.split.train, f.split.validation, quick(3)).history;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == 3);
  CHECK(a == b);
}

TEST_CASE("training lowers the loss and restores the best epoch") {
  const auto& f = fixture();
  RecipeMind model(toy_model(f.vocab.size()), 2);
  std::size_t callbacks = 0;
  TrainConfig t = quick(12);
  t.patience = 2;
  auto result = train(model, f.split.train, f.split.validation, t, [&](const EpochRecord&) { ++callbacks; });
  CHECK(callbacks == result.history.size());
  CHECK(result.history.back().train_loss < result.history.front().train_loss);

  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  for (const auto& r : result.history) {
    if (r.validation_rmse < best) {
      best = r.validation_rmse;
      best_epoch = r.epoch;
    }
  }
  CHECK(result.best_epoch == best_epoch);
  CHECK(result.best_validation_rmse == best);
  auto report = evaluate(ModelPredictor(model), f.split.validation);
  CHECK(std::abs(report.overall.rmse - best) <= 1e-12);
  if (result.stopped_early) {
    CHECK(result.history.size() == result.best_epoch + t.patience);
  }
  CHECK(result.optimizer.steps > 0);
  CHECK(result.optimizer.first_moments.size() == model.parameters().size());
}

TEST_CASE("small overfit run memorizes its training set") {
  const auto& f = fixture();
  std::vector<AffinityInstance> small(f.split.train.begin(), f.split.train.begin() + 48);
  RecipeMind model(toy_model(f.vocab.size()), 6);
  TrainConfig t = quick(150);
  t.learning_rate = 1e-2;
  t.batch_size = 16;
  t.weight_decay = 0.0;
  auto result = train(model, small, small, t);
  CHECK(result.best_validation_rmse < 0.5 * result.history.front().validation_rmse);
}

TEST_CASE("training errors") {
  const auto& f = fixture();
  RecipeMind model(toy_model(f.vocab.size()), 1);
  CHECK_THROWS_AS(train(model, {}, f.split.validation, quick(1)), DataError);
  CHECK_THROWS_AS(train(model, f.split.train, {}, quick(1)), DataError);
  std::vector<AffinityInstance> poisoned(f.split.train.begin(), f.split.train.begin() + 10);
  poisoned[3].score = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(train(model, poisoned, f.split.validation, quick(1)), doctest::Contains("diverged"),
                       nn::NumericError);
}

TEST_CASE("metrics") {
  SUBCASE("exact predictions") {
    auto inst = with_scores({0.1, -0.4, 0.7});
    auto r = evaluate(FixedPredictor({0.1, -0.4, 0.7}), inst);
    CHECK(r.overall.rmse == 0.0);
    CHECK(*r.overall.pcorr == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.by_size.at(2).count == 3);
  }
  SUBCASE("hand Pearson") {
    auto inst = with_scores({1, 2, 4});
    auto r = evaluate(FixedPredictor({1, 2, 3}), inst);
    CHECK(std::abs(*r.overall.pcorr - 0.98198) <= 1e-5);
  }
  SUBCASE("constant predictor") {
    auto inst = with_scores({1, 2, 4, 9});
    auto r = evaluate(FixedPredictor({3, 3, 3, 3}), inst);
    CHECK_FALSE(r.overall.pcorr.has_value());
    // sqrt(mean((y - 3)^2)) = sqrt((4 + 1 + 1 + 36) / 4)
    CHECK(r.overall.rmse == doctest::Approx(std::sqrt(42.0 / 4.0)).epsilon(1e-14));
    CHECK(r.to_json()["overall"]["pcorr"].is_null());
  }
  SUBCASE("single instance group has undefined correlation") {
    std::vector<AffinityInstance> inst = {{{0}, 1, 0.5}, {{0, 2}, 1, 0.1}, {{0, 2}, 3, 0.3}};
    auto r = evaluate(FixedPredictor({0.4, 0.0, 0.5}), inst);
    CHECK_FALSE(r.by_size.at(2).pcorr.has_value());
    CHECK(r.by_size.at(3).pcorr.has_value());
    CHECK(r.by_size.at(2).rmse == doctest::Approx(0.1));
  }
  SUBCASE("empty input") {
    CHECK_THROWS_AS(evaluate(FixedPredictor({}), {}), DataError);
  }
}

TEST_CASE("evaluation ignores instance order") {
  const auto& f = fixture();
  RecipeMind model(toy_model(f.vocab.size()), 8);
  auto inst = evaluation_instances(f.split);
  auto a = evaluate(ModelPredictor(model), inst);
  std::mt19937_64 rng(1);
  std::shuffle(inst.begin(), inst.end(), rng);
  auto b = evaluate(ModelPredictor(model), inst);
  REQUIRE(a.by_size.size() == b.by_size.size());
  for (const auto& [n, g] : a.by_size) {
    CHECK(std::abs(g.rmse - b.by_size.at(n).rmse) <= 1e-12);
    if (g.pcorr) CHECK(std::abs(*g.pcorr - *b.by_size.at(n).pcorr) <= 1e-12);
  }
}

TEST_CASE("naive baselines") {
  CHECK(fit_baseline(BaselineKind::mean, with_scores({1, 2, 3})).value() == 2.0);
  CHECK(fit_baseline(BaselineKind::median, with_scores({1, 2, 3, 10})).value() == 2.5);
  CHECK(fit_baseline(BaselineKind::median, with_scores({5, 1, 3})).value() == 3.0);
  CHECK_THROWS_AS(fit_baseline(BaselineKind::mean, {}), ParameterError);

  const auto& train = fixture().split.train;
  auto mean = fit_baseline(BaselineKind::mean, train);
  long double sum = 0;
  for (const auto& i : train) sum += i.score;
  const double oracle_mean = static_cast<double>(sum / train.size());
  CHECK(std::abs(mean.value() - oracle_mean) <= 1e-12);
  long double sq = 0;
  for (const auto& i : train) sq += (i.score - oracle_mean) * (i.score - oracle_mean);
  const double variance = static_cast<double>(sq / train.size());
  auto r = evaluate(mean, train);
  CHECK(std::abs(r.overall.rmse * r.overall.rmse - variance) <= 1e-12);
  CHECK(mean.name() == "naive_mean");
}

TEST_CASE("experiment suite aggregates seeds") {
  const auto& f = fixture();
  SuiteOptions options;
  options.variants = {"default"};
  options.seeds = {1, 2};
  options.base_model = toy_model(f.vocab.size());
  options.train = quick(2);
  auto result = run_experiment_suite(f.split, options);
  REQUIRE(result.runs.size() == 2);
  REQUIRE(result.baselines.size() == 2);
  auto rows = comparison_rows(result);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].model == "naive_mean");
  CHECK(rows[2].model == "default");
  const auto& cell = rows[2].rmse.at(2);
  CHECK(cell.n == 2);
  const double r1 = result.runs[0].report.by_size.at(2).rmse;
  const double r2 = result.runs[1].report.by_size.at(2).rmse;
  CHECK(cell.mean == doctest::Approx((r1 + r2) / 2));
  CHECK(cell.std == doctest::Approx(std::abs(r1 - r2) / 2));

  std::ostringstream table;
  print_comparison_table(table, result);
  CHECK(table.str().find("RMSE") != std::string::npos);
  CHECK(table.str().find("PCORR") != std::string::npos);
  CHECK(table.str().find("size 5") != std::string::npos);
  CHECK(table.str().find("±") != std::string::npos);

  // Parallel runs match serial ones.
  options.threads = 2;
  auto parallel = run_experiment_suite(f.split, options);
  for (std::size_t i = 0; i < 2; ++i) CHECK(parallel.runs[i].training.history == result.runs[i].training.history);

  options.variants = {"bogus"};
  CHECK_THROWS_AS(run_experiment_suite(f.split, options), ParameterError);
}
