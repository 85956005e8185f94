#include "recipemind/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "recipemind/random.hpp"
#include "recipemind/stats.hpp"

namespace recipemind {

using nn::Parameter;
using nn::Tensor;

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kDropoutStream = 0x44524f50ULL;

struct Batch {
  std::size_t set_size = 0;
  std::vector<std::size_t> members;
};

// Indices grouped by set size, in ascending size order.
std::map<std::size_t, std::vector<std::size_t>> bucket_by_set_size(std::span<const AffinityInstance> instances) {
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < instances.size(); ++i) buckets[instances[i].set_ids.size()].push_back(i);
  return buckets;
}

void gather_batch(std::span<const AffinityInstance> instances, const Batch& batch,
                  std::vector<IngredientId>& sets, std::vector<IngredientId>& additions) {
  sets.clear();
  additions.clear();
  for (std::size_t idx : batch.members) {
    const auto& inst = instances[idx];
    sets.insert(sets.end(), inst.set_ids.begin(), inst.set_ids.end());
    additions.push_back(inst.addition_id);
  }
}

std::vector<Batch> epoch_batches(const std::map<std::size_t, std::vector<std::size_t>>& buckets,
                                 std::size_t batch_size, std::uint64_t seed, std::size_t epoch) {
  std::vector<Batch> batches;
  for (const auto& [set_size, members] : buckets) {
    std::vector<std::size_t> order = members;
    CounterRng rng(seed, hash_combine(hash_combine(kShuffleStream, epoch), set_size));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
      const std::size_t end = std::min(order.size(), begin + batch_size);
      batches.push_back({set_size, {order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end)}});
    }
  }
  CounterRng rng(seed, hash_combine(kShuffleStream, epoch));
  rng.shuffle(std::span<Batch>(batches));
  return batches;
}

std::vector<double> scores_of(std::span<const AffinityInstance> instances) {
  std::vector<double> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(inst.score);
  return out;
}

GroupMetrics group_metrics(std::span<const double> predictions, std::span<const double> targets) {
  GroupMetrics g;
  g.count = targets.size();
  g.rmse = stats::rmse(predictions, targets);
  g.pcorr = stats::pearson(predictions, targets);
  return g;
}

nlohmann::json group_json(const GroupMetrics& g) {
  nlohmann::json j = {{"count", g.count}, {"rmse", g.rmse}};
  j["pcorr"] = g.pcorr ? nlohmann::json(*g.pcorr) : nlohmann::json(nullptr);
  return j;
}

AggregateCell aggregate(const std::vector<double>& values) {
  AggregateCell cell;
  cell.n = values.size();
  if (!values.empty()) {
    cell.mean = stats::mean(values);
    cell.std = stats::population_std(values);
  }
  return cell;
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be non-negative");
  if (max_epochs == 0) throw ParameterError("max_epochs must be >= 1");
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"max_epochs", max_epochs},
          {"batch_size", batch_size},       {"patience", patience},         {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  TrainConfig c;
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.weight_decay = doc.value("weight_decay", c.weight_decay);
  c.max_epochs = doc.value("max_epochs", c.max_epochs);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.patience = doc.value("patience", c.patience);
  c.seed = doc.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"steps", steps},
          {"train_loss", train_loss},
          {"validation_rmse", validation_rmse},
          {"improved", improved}};
}

TrainResult train(RecipeMind& model, std::span<const AffinityInstance> train_set,
                  std::span<const AffinityInstance> validation_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty()) throw DataError("training partition is empty");
  if (validation_set.empty()) throw DataError("validation partition is empty");

  std::vector<Parameter*> params = model.parameters();
  nn::Adam adam({config.learning_rate, config.weight_decay});
  const auto buckets = bucket_by_set_size(train_set);
  const std::vector<double> validation_targets = scores_of(validation_set);
  const std::uint64_t dropout_seed = hash_combine(config.seed, kDropoutStream);
  const ModelPredictor predictor(model);

  TrainResult result;
  std::vector<Tensor> best_values;
  std::size_t without_improvement = 0;
  std::vector<IngredientId> sets, additions;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto batches = epoch_batches(buckets, config.batch_size, config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Batch& batch = batches[b];
      gather_batch(train_set, batch, sets, additions);
      Tensor target(batch.members.size(), 1);
      for (std::size_t i = 0; i < batch.members.size(); ++i) target[i] = train_set[batch.members[i]].score;

      nn::Tape tape;
      const ForwardOptions options{true, dropout_seed, adam.steps()};
      nn::Var loss = nn::rmse_loss(model.forward_batch(tape, sets, batch.set_size, additions, options), target);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw nn::NumericError("training diverged: loss " + std::to_string(value) + " at epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(b + 1) + " of " +
                               std::to_string(batches.size()) + " (set size " +
                               std::to_string(batch.set_size) + ", step " + std::to_string(adam.steps() + 1) +
                               ")");
      }
      loss_sum += value;
      nn::backward(loss, params);
      adam.step(params);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.steps = adam.steps();
    record.train_loss = loss_sum / static_cast<double>(batches.size());
    const auto predictions = predictor.predict(validation_set);
    record.validation_rmse = stats::rmse(predictions, validation_targets);
    if (!std::isfinite(record.validation_rmse)) {
      throw nn::NumericError("validation RMSE is not finite after epoch " + std::to_string(epoch));
    }
    record.improved = result.history.empty() || record.validation_rmse < result.best_validation_rmse;
    if (record.improved) {
      result.best_epoch = epoch;
      result.best_validation_rmse = record.validation_rmse;
      best_values.clear();
      for (const Parameter* p : params) best_values.push_back(p->value);
      result.optimizer = OptimizerSnapshot{adam.config(), adam.steps(), adam.first_moments(), adam.second_moments()};
      without_improvement = 0;
    } else {
      ++without_improvement;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
    if (without_improvement >= config.patience) {
      result.stopped_early = epoch < config.max_epochs;
      break;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(best_values[i]);
  return result;
}

// ---------------------------------------------------------------------------

std::vector<double> ModelPredictor::predict(std::span<const AffinityInstance> instances) const {
  std::vector<double> out(instances.size(), 0.0);
  std::vector<IngredientId> sets, additions;
  for (const auto& [set_size, members] : bucket_by_set_size(instances)) {
    for (std::size_t begin = 0; begin < members.size(); begin += batch_size_) {
      const std::size_t end = std::min(members.size(), begin + batch_size_);
      Batch batch{set_size, {members.begin() + static_cast<std::ptrdiff_t>(begin),
                             members.begin() + static_cast<std::ptrdiff_t>(end)}};
      gather_batch(instances, batch, sets, additions);
      nn::Tape tape(nn::GradMode::disabled);
      const auto scores = model_.forward_batch(tape, sets, set_size, additions, ForwardOptions{}).value();
      for (std::size_t i = 0; i < batch.members.size(); ++i) out[batch.members[i]] = scores[i];
    }
  }
  return out;
}

std::string BaselinePredictor::name() const { return kind_ == BaselineKind::mean ? "naive_mean" : "naive_median"; }

std::vector<double> BaselinePredictor::predict(std::span<const AffinityInstance> instances) const {
  return std::vector<double>(instances.size(), value_);
}

BaselinePredictor fit_baseline(BaselineKind kind, std::span<const AffinityInstance> train_set) {
  if (train_set.empty()) throw ParameterError("cannot fit a baseline on an empty training set");
  const auto scores = scores_of(train_set);
  return BaselinePredictor(kind, kind == BaselineKind::mean ? stats::mean(scores) : stats::median(scores));
}

// ---------------------------------------------------------------------------

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json sizes = nlohmann::json::object();
  for (const auto& [n, g] : by_size) sizes[std::to_string(n)] = group_json(g);
  return {{"by_size", sizes}, {"overall", group_json(overall)}, {"metadata", metadata}};
}

MetricsReport compute_metrics(std::span<const AffinityInstance> instances, std::span<const double> predictions) {
  if (instances.size() != predictions.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(instances.size()) + " instances");
  }
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto& [pred, target] = groups[instances[i].union_size()];
    pred.push_back(predictions[i]);
    target.push_back(instances[i].score);
  }
  MetricsReport report;
  for (const auto& [n, g] : groups) report.by_size[n] = group_metrics(g.first, g.second);
  report.overall = group_metrics(predictions, scores_of(instances));
  return report;
}

MetricsReport evaluate(const Predictor& predictor, std::span<const AffinityInstance> instances) {
  if (instances.empty()) throw DataError("cannot evaluate on an empty instance set");
  const auto predictions = predictor.predict(instances);
  MetricsReport report = compute_metrics(instances, predictions);
  report.metadata["predictor"] = predictor.name();
  return report;
}

std::vector<AffinityInstance> evaluation_instances(const DatasetSplit& split) {
  std::vector<AffinityInstance> out = split.test;
  for (const auto& [n, group] : split.test_only_sizes) out.insert(out.end(), group.begin(), group.end());
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json SuiteResult::to_json() const {
  nlohmann::json doc = {{"runs", nlohmann::json::array()}, {"baselines", nlohmann::json::array()}};
  for (const auto& run : runs) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : run.training.history) history.push_back(r.to_json());
    doc["runs"].push_back({{"variant", run.variant},
                           {"seed", run.seed},
                           {"best_epoch", run.training.best_epoch},
                           {"history", history},
                           {"report", run.report.to_json()}});
  }
  for (const auto& [name, report] : baselines) doc["baselines"].push_back({{"name", name}, {"report", report.to_json()}});
  return doc;
}

SuiteResult run_experiment_suite(const DatasetSplit& split, const SuiteOptions& options) {
  if (options.variants.empty()) throw ParameterError("no variants requested");
  if (options.seeds.empty()) throw ParameterError("no seeds requested");
  for (const auto& v : options.variants) variant_config(v, options.base_model);  // fail fast on bad names
  options.train.validate();
  const auto eval_set = evaluation_instances(split);
  if (eval_set.empty()) throw DataError("split has no test instances");

  SuiteResult result;
  if (options.include_baselines) {
    for (auto kind : {BaselineKind::mean, BaselineKind::median}) {
      const auto baseline = fit_baseline(kind, split.train);
      MetricsReport report = evaluate(baseline, eval_set);
      report.metadata["value"] = baseline.value();
      result.baselines.emplace_back(baseline.name(), std::move(report));
    }
  }

  for (const auto& variant : options.variants) {
    for (auto seed : options.seeds) result.runs.push_back({variant, seed, {}, {}});
  }

  auto run_one = [&](SuiteRun& run) {
    RecipeMind model(variant_config(run.variant, options.base_model), run.seed);
    if (options.pretrained_embeddings) model.use_pretrained_embeddings(*options.pretrained_embeddings);
    TrainConfig config = options.train;
    config.seed = run.seed;
    run.training = train(model, split.train, split.validation, config);
    run.report = evaluate(ModelPredictor(model, run.variant), eval_set);
    run.report.metadata["variant"] = run.variant;
    run.report.metadata["seed"] = run.seed;
  };

  unsigned workers = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
  workers = std::min<unsigned>(workers, static_cast<unsigned>(result.runs.size()));
  if (workers <= 1) {
    for (auto& run : result.runs) run_one(run);
    return result;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(result.runs.size());
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < result.runs.size(); i = next++) {
          try {
            run_one(result.runs[i]);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return result;
}

std::vector<ComparisonRow> comparison_rows(const SuiteResult& result) {
  std::vector<ComparisonRow> rows;
  for (const auto& [name, report] : result.baselines) {
    ComparisonRow row{name, {}, {}};
    for (const auto& [n, g] : report.by_size) {
      row.rmse[n] = aggregate({g.rmse});
      if (g.pcorr) row.pcorr[n] = aggregate({*g.pcorr});
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::string> order;
  for (const auto& run : result.runs) {
    if (std::find(order.begin(), order.end(), run.variant) == order.end()) order.push_back(run.variant);
  }
  for (const auto& variant : order) {
    std::map<std::size_t, std::vector<double>> rmse, pcorr;
    for (const auto& run : result.runs) {
      if (run.variant != variant) continue;
      for (const auto& [n, g] : run.report.by_size) {
        rmse[n].push_back(g.rmse);
        if (g.pcorr) pcorr[n].push_back(*g.pcorr);
      }
    }
    ComparisonRow row{variant, {}, {}};
    for (const auto& [n, v] : rmse) row.rmse[n] = aggregate(v);
    for (const auto& [n, v] : pcorr) row.pcorr[n] = aggregate(v);
    rows.push_back(std::move(row));
  }
  return rows;
}

void print_comparison_table(std::ostream& out, const SuiteResult& result) {
  const auto rows = comparison_rows(result);
  std::set<std::size_t> sizes;
  for (const auto& row : rows) {
    for (const auto& [n, cell] : row.rmse) sizes.insert(n);
  }
  std::size_t name_width = 5;
  for (const auto& row : rows) name_width = std::max(name_width, row.model.size());

  auto cell_text = [](const std::map<std::size_t, AggregateCell>& cells, std::size_t n) {
    auto it = cells.find(n);
    if (it == cells.end()) return std::string("-");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f ± %.4f", it->second.mean, it->second.std);
    return std::string(buf);
  };
  auto table = [&](const char* title, auto member) {
    out << title << '\n';
    out << std::left << std::setw(static_cast<int>(name_width)) << "model";
    for (auto n : sizes) out << "  " << std::left << std::setw(17) << ("size " + std::to_string(n));
    out << '\n';
    for (const auto& row : rows) {
      out << std::left << std::setw(static_cast<int>(name_width)) << row.model;
      for (auto n : sizes) {
        const std::string text = cell_text(row.*member, n);
        // "±" is two bytes but one column wide.
        const std::size_t shown = text.size() - (text.find("±") != std::string::npos ? 1 : 0);
        out << "  " << text << std::string(shown < 17 ? 17 - shown : 0, ' ');
      }
      out << '\n';
    }
  };
  table("RMSE (mean ± std over seeds)", &ComparisonRow::rmse);
  out << '\n';
  table("PCORR (mean ± std over seeds)", &ComparisonRow::pcorr);
}

}  // namespace recipemind
