#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recipemind/affinity.hpp"
#include "recipemind/checkpoint.hpp"
#include "recipemind/model.hpp"
#include "recipemind/nn/adam.hpp"

namespace recipemind {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  std::size_t max_epochs = 30;
  std::size_t batch_size = 1024;
  // Epochs without a validation improvement before stopping. 0 stops after
  // the first epoch.
  std::size_t patience = 3;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& doc);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;  // optimizer steps so far
  // Mean of per-batch RMSE losses in training mode.
  double train_loss = 0.0;
  // Evaluation-mode RMSE over the validation partition.
  double validation_rmse = 0.0;
  bool improved = false;

  nlohmann::json to_json() const;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_validation_rmse = 0.0;
  bool stopped_early = false;
  // Optimizer state at the end of the best epoch.
  OptimizerSnapshot optimizer;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch Adam on the batch RMSE loss. Batches hold one set size each.
// On return the model carries the parameters of the best validation epoch.
// A non-finite loss throws nn::NumericError.
TrainResult train(RecipeMind& model, std::span<const AffinityInstance> train_set,
                  std::span<const AffinityInstance> validation_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> predict(std::span<const AffinityInstance> instances) const = 0;
};

// Evaluation-mode model predictions, batched by set size.
class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const RecipeMind& model, std::string name = "recipemind",
                          std::size_t batch_size = 2048)
      : model_(model), name_(std::move(name)), batch_size_(batch_size) {}

  std::string name() const override { return name_; }
  std::vector<double> predict(std::span<const AffinityInstance> instances) const override;

 private:
  const RecipeMind& model_;
  std::string name_;
  std::size_t batch_size_;
};

enum class BaselineKind { mean, median };

class BaselinePredictor : public Predictor {
 public:
  BaselinePredictor(BaselineKind kind, double value) : kind_(kind), value_(value) {}

  BaselineKind kind() const { return kind_; }
  double value() const { return value_; }
  std::string name() const override;
  std::vector<double> predict(std::span<const AffinityInstance> instances) const override;

 private:
  BaselineKind kind_;
  double value_;
};

// Throws ParameterError on empty input.
BaselinePredictor fit_baseline(BaselineKind kind, std::span<const AffinityInstance> train_set);

struct GroupMetrics {
  std::size_t count = 0;
  double rmse = 0.0;
  // Undefined for fewer than two instances or a constant side.
  std::optional<double> pcorr;
};

struct MetricsReport {
  std::map<std::size_t, GroupMetrics> by_size;  // keyed by union size
  GroupMetrics overall;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
};

// Metrics of arbitrary predictions against the instances' scores.
MetricsReport compute_metrics(std::span<const AffinityInstance> instances, std::span<const double> predictions);
MetricsReport evaluate(const Predictor& predictor, std::span<const AffinityInstance> instances);

// Test partition plus every test-only size.
std::vector<AffinityInstance> evaluation_instances(const DatasetSplit& split);

struct SuiteOptions {
  std::vector<std::string> variants = {"default"};
  std::vector<std::uint64_t> seeds = {1};
  ModelConfig base_model;
  TrainConfig train;
  std::optional<nn::Tensor> pretrained_embeddings;
  bool include_baselines = true;
  // Concurrent (variant, seed) runs; 0 picks hardware concurrency.
  unsigned threads = 1;
};

struct SuiteRun {
  std::string variant;
  std::uint64_t seed = 0;
  TrainResult training;
  MetricsReport report;
};

struct SuiteResult {
  std::vector<SuiteRun> runs;                             // variants x seeds, in option order
  std::vector<std::pair<std::string, MetricsReport>> baselines;

  nlohmann::json to_json() const;
};

SuiteResult run_experiment_suite(const DatasetSplit& split, const SuiteOptions& options);

struct AggregateCell {
  double mean = 0.0;
  double std = 0.0;  // population, over seeds
  std::size_t n = 0;
};

struct ComparisonRow {
  std::string model;
  std::map<std::size_t, AggregateCell> rmse;
  std::map<std::size_t, AggregateCell> pcorr;
};

// One row per model (baselines first), one column per union size.
std::vector<ComparisonRow> comparison_rows(const SuiteResult& result);
void print_comparison_table(std::ostream& out, const SuiteResult& result);

}  // namespace recipemind
