// recipemind: corpus -> counter -> dataset -> model -> ideation, plus the
// HTTP service. Exit codes: 0 ok, 1 usage, 2 data, 3 runtime.

#include <malloc.h>
#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "recipemind/affinity.hpp"
#include "recipemind/checkpoint.hpp"
#include "recipemind/corpus.hpp"
#include "recipemind/fingerprint.hpp"
#include "recipemind/ideation.hpp"
#include "recipemind/model.hpp"
#include "recipemind/nn/tape.hpp"
#include "recipemind/service.hpp"
#include "recipemind/synthetic.hpp"
#include "recipemind/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace recipemind;

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kRuntimeError = 3;
constexpr const char* kEnvPrefix = "RECIPEMIND_";

// "--min-subset-count" -> "RECIPEMIND_MIN_SUBSET_COUNT"
std::string env_name(const std::string& flag) {
  std::string out = kEnvPrefix;
  for (char c : flag) out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

// JSON config: top-level keys are global flags, a nested object per
// subcommand holds its flags. Keys whose environment variable is set are
// dropped so that the environment wins over the file.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json doc = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const std::string name = opt->get_lnames().front();
      if (opt->count() > 0) {
        doc[name] = opt->reduced_results().size() == 1 ? json(opt->reduced_results().front())
                                                       : json(opt->reduced_results());
      } else if (default_also && !opt->get_default_str().empty()) {
        doc[name] = opt->get_default_str();
      }
    }
    return doc.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json doc;
    try {
      input >> doc;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    collect(doc, "", {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static void collect(const json& j, const std::string& name, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& out) {
    if (j.is_object()) {
      if (!name.empty()) parents.push_back(name);
      for (const auto& [key, value] : j.items()) collect(value, key, parents, out);
      return;
    }
    if (std::getenv(env_name(name).c_str()) != nullptr) return;
    CLI::ConfigItem item;
    item.name = name;
    item.parents = parents;
    if (j.is_array()) {
      for (const auto& v : j) item.inputs.push_back(scalar(v));
    } else if (j.is_boolean()) {
      item.inputs = {j.get<bool>() ? "true" : "false"};
    } else {
      item.inputs = {scalar(j)};
    }
    out.push_back(std::move(item));
  }
};

void attach_env(CLI::App& app) {
  for (CLI::Option* opt : app.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help" || name == "config" || name == "version") continue;
    opt->envname(env_name(name));
  }
  for (CLI::App* sub : app.get_subcommands({})) attach_env(*sub);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!normalize_ingredient_name(item).empty()) out.push_back(item);
  }
  return out;
}

std::vector<IngredientId> lookup(const IngredientVocabulary& vocab, const std::vector<std::string>& names) {
  std::vector<IngredientId> out;
  for (const auto& n : names) out.push_back(vocab.id_of(n));
  return out;
}

// Written next to every artifact: enough to re-run the command.
class RunManifest {
 public:
  RunManifest(const CLI::App& command, std::vector<std::string> argv) {
    doc_ = {{"command", command.get_name()}, {"argv", std::move(argv)}, {"started_at", utc_now()}};
    json config = json::object();
    for (const CLI::Option* opt : command.get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || name == "help") continue;
      const auto& values = opt->reduced_results();
      if (opt->get_expected_max() == 0) {
        config[name] = opt->count() > 0;
      } else if (!values.empty()) {
        config[name] = values.size() == 1 ? json(values.front()) : json(values);
      } else {
        config[name] = opt->get_default_str();
      }
    }
    doc_["config"] = config;
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::object();
  }

  void seed(std::uint64_t value) { doc_["seed"] = value; }
  void input(const std::string& role, const fs::path& path) { doc_["inputs"][role] = describe(path); }
  void output(const std::string& role, const fs::path& path) { doc_["outputs"][role] = describe(path); }
  json& extra() { return doc_; }

  void write(const fs::path& path) {
    doc_["finished_at"] = utc_now();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc_.dump(2) << '\n';
  }

 private:
  static json describe(const fs::path& path) {
    json d = {{"path", path.string()}};
    if (fs::is_regular_file(path)) d["sha256"] = file_sha256_hex(path);
    return d;
  }
  json doc_;
};

void print_metrics(std::ostream& out, const std::vector<std::pair<std::string, MetricsReport>>& reports) {
  std::set<std::size_t> sizes;
  for (const auto& [name, r] : reports) {
    for (const auto& [n, g] : r.by_size) sizes.insert(n);
  }
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(4) << *v;
    } else {
      s << "-";
    }
    return s.str();
  };
  for (const char* metric : {"RMSE", "PCORR"}) {
    out << metric << '\n' << std::left << std::setw(16) << "predictor";
    for (auto n : sizes) out << std::right << std::setw(10) << ("size " + std::to_string(n));
    out << std::right << std::setw(10) << "all" << '\n';
    for (const auto& [name, r] : reports) {
      out << std::left << std::setw(16) << name;
      auto value = [&](const GroupMetrics& g) {
        return std::string(metric) == "RMSE" ? std::optional<double>(g.rmse) : g.pcorr;
      };
      for (auto n : sizes) {
        auto it = r.by_size.find(n);
        out << std::right << std::setw(10) << (it == r.by_size.end() ? "-" : cell(value(it->second)));
      }
      out << std::right << std::setw(10) << cell(value(r.overall)) << '\n';
    }
    out << '\n';
  }
}

struct Globals {
  unsigned threads = 1;
  std::vector<std::string> argv;
};

// ---------------------------------------------------------------------------

struct GenerateArgs {
  PlantedCorpusOptions options;
  fs::path out;
};

void run_generate(const GenerateArgs& a, const CLI::App& cmd, const Globals& g) {
  const auto recipes = generate_planted_corpus(a.options);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  std::ofstream out(a.out);
  if (!out) throw std::runtime_error("cannot write " + a.out.string());
  for (const auto& r : recipes) out << json{{"id", r.id}, {"ingredients", r.ingredients}}.dump() << '\n';
  out.close();
  RunManifest m(cmd, g.argv);
  m.seed(a.options.seed);
  m.output("corpus", a.out);
  m.write(a.out.string() + ".manifest.json");
  std::cout << "wrote " << recipes.size() << " recipes to " << a.out.string() << '\n';
}

struct IngestArgs {
  fs::path corpus;
  fs::path out;
  Count min_ingredient_count = 20;
  Count min_subset_count = 5;
  std::size_t max_size = 7;
};

void run_ingest(const IngestArgs& a, const CLI::App& cmd, const Globals& g) {
  const auto recipes = load_corpus(a.corpus);
  if (recipes.empty()) throw DataError(a.corpus.string() + ": corpus is empty");
  const auto vocab = build_vocabulary(recipes, a.min_ingredient_count);
  if (vocab.empty()) throw DataError("no ingredient reaches the minimum count of " + std::to_string(a.min_ingredient_count));
  CountOptions options;
  options.max_size = a.max_size;
  options.min_subset_count = a.min_subset_count;
  options.threads = g.threads;
  const auto counter = count_subsets(recipes, vocab, options);

  fs::create_directories(a.out);
  vocab.save(a.out / "vocabulary.tsv");
  counter.save(a.out / "counter.tsv");
  RunManifest m(cmd, g.argv);
  m.input("corpus", a.corpus);
  m.output("vocabulary", a.out / "vocabulary.tsv");
  m.output("counter", a.out / "counter.tsv");
  m.extra()["recipes"] = recipes.size();
  m.extra()["vocabulary_size"] = vocab.size();
  m.extra()["vocabulary_fingerprint"] = vocab.fingerprint();
  m.write(a.out / "ingest.manifest.json");

  std::cout << "recipes      " << recipes.size() << "\nvocabulary   " << vocab.size() << '\n';
  for (std::size_t n = 1; n <= counter.max_subset_size(); ++n) {
    std::cout << "subsets of " << n << "  " << counter.subsets_of_size(n).size() << '\n';
  }
}

struct BuildArgs {
  fs::path counter;
  fs::path vocabulary;
  fs::path out;
  double delta = 0.2;
  std::uint64_t seed = 0;
  std::vector<double> ratios = {0.8, 0.05, 0.15};
  std::vector<std::size_t> train_sizes = {2, 3, 4};
  std::vector<std::size_t> test_only_sizes = {5, 6, 7};
};

void run_build(BuildArgs a, const CLI::App& cmd, const Globals& g) {
  if (fs::is_directory(a.counter)) a.counter /= "counter.tsv";
  if (a.vocabulary.empty()) a.vocabulary = a.counter.parent_path() / "vocabulary.tsv";
  if (a.ratios.size() != 3) throw ParameterError("--ratios takes three values: train,validation,test");
  const auto counter = SubsetCounter::load(a.counter);
  const auto vocab = IngredientVocabulary::load(a.vocabulary);
  const std::set<std::size_t> train_sizes(a.train_sizes.begin(), a.train_sizes.end());
  const std::set<std::size_t> test_only(a.test_only_sizes.begin(), a.test_only_sizes.end());
  ScoreParams params;
  params.delta = a.delta;
  params.validate();
  const SplitRatios ratios{a.ratios[0], a.ratios[1], a.ratios[2]};
  ratios.validate();

  auto built = build_instances(counter, train_sizes, test_only, params);
  std::vector<AffinityInstance> all = std::move(built.trainable);
  for (auto& [n, v] : built.test_only) all.insert(all.end(), v.begin(), v.end());
  const auto split = split_by_subset(std::move(all), ratios, a.seed, test_only);

  fs::create_directories(a.out);
  split.save(a.out);
  fs::copy_file(a.vocabulary, a.out / "vocabulary.tsv", fs::copy_options::overwrite_existing);

  RunManifest m(cmd, g.argv);
  m.seed(a.seed);
  m.input("counter", a.counter);
  m.input("vocabulary", a.vocabulary);
  for (const auto& entry : fs::directory_iterator(a.out)) {
    if (entry.path().extension() == ".tsv") m.output(entry.path().stem().string(), entry.path());
  }
  m.output("split_manifest", a.out / "split.json");
  m.extra()["skipped_instances"] = built.skipped;
  m.write(a.out / "build-dataset.manifest.json");

  std::cout << "train        " << split.train.size() << "\nvalidation   " << split.validation.size()
            << "\ntest         " << split.test.size() << '\n';
  for (const auto& [n, v] : split.test_only_sizes) std::cout << "test size " << n << "  " << v.size() << '\n';
  if (built.skipped > 0) std::cout << "skipped      " << built.skipped << " (remainder below the subset threshold)\n";
}

std::vector<AffinityInstance> load_any_instances(const fs::path& path) {
  if (!fs::is_directory(path)) return load_instances(path);
  const auto split = DatasetSplit::load(path);
  std::vector<AffinityInstance> all = split.train;
  all.insert(all.end(), split.validation.begin(), split.validation.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  for (const auto& [n, v] : split.test_only_sizes) all.insert(all.end(), v.begin(), v.end());
  return all;
}

struct StatsArgs {
  fs::path instances;
  std::size_t bins = 10;
};

void run_stats(const StatsArgs& a) {
  const auto instances = load_any_instances(a.instances);
  print_score_stats(std::cout, score_distribution_stats(instances, a.bins));
}

// Model and training flags shared by train and ablate.
struct ModelArgs {
  ModelConfig model;
  TrainConfig train;
  fs::path embeddings;
};

void add_model_flags(CLI::App* cmd, ModelArgs& a) {
  cmd->add_option("--embed-dim", a.model.embed_dim, "Embedding width (ignored with --embeddings)")
      ->capture_default_str();
  cmd->add_option("--hidden-dim", a.model.hidden_dim, "Hidden width h")->capture_default_str();
  cmd->add_option("--blocks", a.model.num_blocks, "Attention blocks L")->capture_default_str();
  cmd->add_option("--heads", a.model.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--dropout", a.model.dropout_p, "Dropout probability")->capture_default_str();
  cmd->add_option("--rff-depth", a.model.rff_depth, "Layers per row-wise feed-forward stack")->capture_default_str();
  cmd->add_option("--embeddings", a.embeddings, "Pretrained embedding file; rows stay frozen");
  cmd->add_option("--lr", a.train.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", a.train.weight_decay, "Decoupled weight decay")->capture_default_str();
  cmd->add_option("--epochs", a.train.max_epochs, "Maximum epochs")->capture_default_str();
  cmd->add_option("--batch-size", a.train.batch_size, "Instances per batch")->capture_default_str();
  cmd->add_option("--patience", a.train.patience, "Epochs without validation improvement before stopping")
      ->capture_default_str();
}

std::optional<nn::Tensor> prepare_embeddings(ModelArgs& a, const IngredientVocabulary& vocab) {
  a.model.vocab_size = vocab.size();
  if (a.embeddings.empty()) return std::nullopt;
  auto table = load_embedding_file(a.embeddings, vocab);
  a.model.embed_dim = table.cols();
  a.model.pretrained_embeddings = true;
  return table;
}

struct TrainArgs {
  fs::path data;
  fs::path out;
  std::string variant = "default";
  std::uint64_t seed = 0;
  ModelArgs m;
};

void run_train(TrainArgs a, const CLI::App& cmd, const Globals& g) {
  const auto split = DatasetSplit::load(a.data);
  const auto vocab = IngredientVocabulary::load(a.data / "vocabulary.tsv");
  auto table = prepare_embeddings(a.m, vocab);
  const ModelConfig config = variant_config(a.variant, a.m.model);
  config.validate();
  TrainConfig tc = a.m.train;
  tc.seed = a.seed;
  tc.validate();

  RecipeMind model(config, a.seed);
  if (table) model.use_pretrained_embeddings(std::move(*table));
  std::cout << "epoch  train_loss  validation_rmse\n";
  const auto result = train(model, split.train, split.validation, tc, [](const EpochRecord& r) {
    std::cout << std::setw(5) << r.epoch << std::fixed << std::setprecision(6) << std::setw(12) << r.train_loss
              << std::setw(17) << r.validation_rmse << (r.improved ? "  *" : "") << std::defaultfloat << std::endl;
  });

  Checkpoint ck{std::move(model), vocab, a.seed, result.optimizer, json::object()};
  ck.metadata["variant"] = a.variant;
  ck.metadata["train_config"] = tc.to_json();
  ck.metadata["best_epoch"] = result.best_epoch;
  ck.metadata["best_validation_rmse"] = result.best_validation_rmse;
  json history = json::array();
  for (const auto& r : result.history) history.push_back(r.to_json());
  ck.metadata["history"] = history;
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  save_checkpoint(a.out, ck);

  RunManifest m(cmd, g.argv);
  m.seed(a.seed);
  m.input("dataset", a.data / "split.json");
  if (!a.m.embeddings.empty()) m.input("embeddings", a.m.embeddings);
  m.output("checkpoint", a.out);
  m.extra()["history"] = history;
  m.extra()["best_epoch"] = result.best_epoch;
  m.write(a.out.string() + ".manifest.json");
  std::cout << "best epoch " << result.best_epoch << ", validation RMSE " << result.best_validation_rmse
            << (result.stopped_early ? " (stopped early)" : "") << "\nwrote " << a.out.string() << '\n';
}

FingerprintPolicy parse_policy(const std::string& s) {
  if (s == "reject") return FingerprintPolicy::reject;
  if (s == "warn") return FingerprintPolicy::warn;
  return FingerprintPolicy::ignore;
}

struct EvaluateArgs {
  fs::path checkpoint;
  fs::path data;
  bool baselines = true;
  std::string policy = "reject";
  fs::path out;
};

void run_evaluate(const EvaluateArgs& a, const CLI::App& cmd, const Globals& g) {
  const auto split = DatasetSplit::load(a.data);
  const auto vocab = IngredientVocabulary::load(a.data / "vocabulary.tsv");
  const auto ck = load_checkpoint(a.checkpoint, vocab.fingerprint(), parse_policy(a.policy));
  const auto eval_set = evaluation_instances(split);
  std::vector<std::pair<std::string, MetricsReport>> reports;
  reports.emplace_back("recipemind", evaluate(ModelPredictor(ck.model), eval_set));
  if (a.baselines) {
    for (auto kind : {BaselineKind::mean, BaselineKind::median}) {
      const auto b = fit_baseline(kind, split.train);
      reports.emplace_back(b.name(), evaluate(b, eval_set));
    }
  }
  print_metrics(std::cout, reports);
  if (!a.out.empty()) {
    json doc = json::object();
    for (const auto& [name, r] : reports) doc[name] = r.to_json();
    std::ofstream(a.out) << doc.dump(2) << '\n';
    RunManifest m(cmd, g.argv);
    m.input("checkpoint", a.checkpoint);
    m.input("dataset", a.data / "split.json");
    m.output("metrics", a.out);
    m.write(a.out.string() + ".manifest.json");
  }
}

struct AblateArgs {
  fs::path data;
  std::vector<std::string> variants = {"default", "shared_sab", "deep_sets", "pma", "mean", "max"};
  std::vector<std::uint64_t> seeds = {1, 2};
  bool baselines = true;
  fs::path out;
  ModelArgs m;
};

void run_ablate(AblateArgs a, const CLI::App& cmd, const Globals& g) {
  const auto split = DatasetSplit::load(a.data);
  const auto vocab = IngredientVocabulary::load(a.data / "vocabulary.tsv");
  SuiteOptions options;
  options.pretrained_embeddings = prepare_embeddings(a.m, vocab);
  options.variants = a.variants;
  options.seeds = a.seeds;
  options.base_model = a.m.model;
  options.train = a.m.train;
  options.include_baselines = a.baselines;
  options.threads = g.threads;
  for (const auto& v : a.variants) variant_config(v, a.m.model).validate();
  const auto result = run_experiment_suite(split, options);
  print_comparison_table(std::cout, result);
  if (!a.out.empty()) {
    std::ofstream(a.out) << result.to_json().dump(2) << '\n';
    RunManifest m(cmd, g.argv);
    m.input("dataset", a.data / "split.json");
    m.output("results", a.out);
    m.write(a.out.string() + ".manifest.json");
  }
}

struct IdeateArgs {
  fs::path checkpoint;
  std::string start;
  std::size_t steps = 8;
  std::size_t top_k = 3;
  bool interactive = false;
  std::string exclude;
  fs::path out = "session.json";
};

// Reads picks from stdin: a rank, an ingredient name, empty/"a" for the top
// suggestion, "q" to finish.
void interactive_loop(IdeationSession& session, const CandidateScorer& scorer, const IngredientVocabulary& vocab,
                      const std::vector<IngredientId>& exclude) {
  std::string line;
  while (true) {
    const auto set = session.current_set();
    const auto recs = recommend(scorer, set, session.top_k, exclude);
    if (recs.empty()) {
      std::cout << "no candidates left\n";
      return;
    }
    std::cout << "\ncurrent set:";
    for (auto id : set) std::cout << ' ' << vocab.name(id);
    std::cout << '\n';
    for (std::size_t r = 0; r < recs.size(); ++r) {
      std::cout << "  " << r + 1 << ". " << vocab.name(recs[r].id) << "  (" << std::fixed << std::setprecision(4)
                << recs[r].score << std::defaultfloat << ")\n";
    }
    std::cout << "pick [rank | name | enter = top | q = done]: " << std::flush;
    if (!std::getline(std::cin, line)) return;
    const std::string choice = normalize_ingredient_name(line);
    if (choice == "q") return;
    std::optional<IngredientId> pick;
    if (!choice.empty() && choice != "a") {
      if (std::all_of(choice.begin(), choice.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        const std::size_t rank = std::stoul(choice);
        if (rank == 0 || rank > recs.size()) {
          std::cout << "no such rank\n";
          continue;
        }
        pick = recs[rank - 1].id;
      } else if (auto id = vocab.find(choice)) {
        pick = *id;
      } else {
        std::cout << "unknown ingredient '" << choice << "'\n";
        continue;
      }
    }
    try {
      step(session, scorer, pick, exclude);
    } catch (const DataError& e) {
      std::cout << e.what() << '\n';
    }
  }
}

void run_ideate(const IdeateArgs& a, const CLI::App& cmd, const Globals& g) {
  const auto ck = load_checkpoint(a.checkpoint);
  const std::string fingerprint = file_sha256_hex(a.checkpoint);
  ModelScorer scorer(ck.model, g.threads);
  const auto start = lookup(ck.vocabulary, split_names(a.start));
  const auto exclude = lookup(ck.vocabulary, split_names(a.exclude));
  auto session = start_session(scorer, start, a.top_k, "cli", fingerprint);
  if (a.interactive) {
    interactive_loop(session, scorer, ck.vocabulary, exclude);
  } else {
    for (std::size_t i = 0; i < a.steps; ++i) step(session, scorer, std::nullopt, exclude);
  }
  print_session_table(std::cout, session, ck.vocabulary);
  if (!a.out.empty()) {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream out(a.out);
    if (!out) throw std::runtime_error("cannot write " + a.out.string());
    out << session.to_json(ck.vocabulary).dump(2) << '\n';
    out.close();
    RunManifest m(cmd, g.argv);
    m.input("checkpoint", a.checkpoint);
    m.output("session", a.out);
    m.write(a.out.string() + ".manifest.json");
  }
}

struct PredictArgs {
  fs::path checkpoint;
  std::string set;
  std::string addition;
};

void run_predict(const PredictArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto set = lookup(ck.vocabulary, split_names(a.set));
  const IngredientId addition = ck.vocabulary.id_of(a.addition);
  if (std::find(set.begin(), set.end(), addition) != set.end()) {
    throw DataError("addition '" + ck.vocabulary.name(addition) + "' is already in the set");
  }
  std::cout << std::setprecision(17) << ck.model.forward(set, addition).first << '\n';
}

struct ServeArgs {
  fs::path checkpoint;
  std::string addr = "127.0.0.1";
  int port = 8080;
  fs::path sessions;
};

int run_serve(const ServeArgs& a, const Globals& g) {
  // Block the shutdown signals before any worker exists, then wait for them
  // on a dedicated thread.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  ServiceOptions options;
  options.threads = std::max(1u, g.threads);
  if (!a.sessions.empty()) options.session_snapshot = a.sessions;
  RecipeMindService service(options);
  service.load_file(a.checkpoint);
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down\n";
    service.stop();
  });
  waiter.detach();
  std::cerr << "serving " << a.checkpoint.string() << " on http://" << a.addr << ':' << a.port << std::endl;
  if (!service.listen(a.addr, a.port)) {
    std::cerr << "error: cannot listen on " << a.addr << ':' << a.port << '\n';
    return kRuntimeError;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many mid-sized buffers; keeping them off
  // mmap avoids a steady stream of page faults.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  Globals g;
  g.argv.assign(argv, argv + argc);

  CLI::App app{"Ingredient-set affinity mining, training and ideation."};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "JSON config file; a nested object per subcommand. Flags and RECIPEMIND_* "
                                 "environment variables take precedence");
  app.add_option("--threads", g.threads, "Worker thread cap")->capture_default_str();
  app.set_version_flag("--version", "recipemind 1.0");

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate-corpus", "Write a synthetic corpus with planted cuisine clusters");
  gen_cmd->add_option("--out", gen.out, "Output JSONL corpus")->required();
  gen_cmd->add_option("--recipes", gen.options.recipes)->capture_default_str();
  gen_cmd->add_option("--ingredients", gen.options.ingredients)->capture_default_str();
  gen_cmd->add_option("--clusters", gen.options.clusters)->capture_default_str();
  gen_cmd->add_option("--min-recipe-size", gen.options.min_recipe_size)->capture_default_str();
  gen_cmd->add_option("--max-recipe-size", gen.options.max_recipe_size)->capture_default_str();
  gen_cmd->add_option("--in-cluster", gen.options.in_cluster_probability,
                      "Probability an ingredient comes from the recipe's cluster")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.options.seed)->capture_default_str();

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Count ingredient subsets of a JSONL corpus");
  ingest_cmd->add_option("corpus", ingest.corpus, "Corpus, one {\"id\", \"ingredients\"} object per line")->required();
  ingest_cmd->add_option("--out", ingest.out, "Output directory for vocabulary.tsv and counter.tsv")->required();
  ingest_cmd->add_option("--min-ingredient-count", ingest.min_ingredient_count)->capture_default_str();
  ingest_cmd->add_option("--min-subset-count", ingest.min_subset_count)->capture_default_str();
  ingest_cmd->add_option("--max-size", ingest.max_size, "Largest subset size counted")->capture_default_str();

  BuildArgs build;
  auto* build_cmd = app.add_subcommand("build-dataset", "Score leave-one-out instances and split them");
  build_cmd->add_option("counter", build.counter, "counter.tsv or the ingest output directory")->required();
  build_cmd->add_option("--vocabulary", build.vocabulary, "Defaults to vocabulary.tsv beside the counter");
  build_cmd->add_option("--out", build.out, "Output dataset directory")->required();
  build_cmd->add_option("--delta", build.delta, "Significance parameter in (0, 1]")->capture_default_str();
  build_cmd->add_option("--seed", build.seed, "Split hash seed")->capture_default_str();
  build_cmd->add_option("--ratios", build.ratios, "train,validation,test")->delimiter(',')->capture_default_str();
  build_cmd->add_option("--train-sizes", build.train_sizes, "Union sizes split for training")
      ->delimiter(',')
      ->capture_default_str();
  build_cmd->add_option("--test-only-sizes", build.test_only_sizes, "Union sizes kept for zero-shot testing")
      ->delimiter(',')
      ->capture_default_str();

  StatsArgs stats;
  auto* stats_cmd = app.add_subcommand("stats", "Per-size score distribution of instances");
  stats_cmd->add_option("instances", stats.instances, "Instance TSV or dataset directory")->required();
  stats_cmd->add_option("--bins", stats.bins, "Histogram bins")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write a checkpoint");
  train_cmd->add_option("data", tr.data, "Dataset directory from build-dataset")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--variant", tr.variant, "default, shared_sab, deep_sets, pma, mean or max")
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Initialisation, shuffling and dropout seed")->capture_default_str();
  add_model_flags(train_cmd, tr.m);

  EvaluateArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Per-size RMSE and PCORR on the test partitions");
  eval_cmd->add_option("checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("data", ev.data, "Dataset directory")->required();
  eval_cmd->add_flag("!--no-baselines", ev.baselines, "Skip the mean and median baselines");
  eval_cmd->add_option("--fingerprint-policy", ev.policy, "Vocabulary mismatch handling")
      ->check(CLI::IsMember({"reject", "warn", "ignore"}))
      ->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Also write the metrics as JSON");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train variants x seeds and print the comparison table");
  ablate_cmd->add_option("data", ab.data, "Dataset directory")->required();
  ablate_cmd->add_option("--variants", ab.variants)->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--seeds", ab.seeds)->delimiter(',')->capture_default_str();
  ablate_cmd->add_flag("!--no-baselines", ab.baselines, "Skip the mean and median baselines");
  ablate_cmd->add_option("--out", ab.out, "Also write all runs as JSON");
  add_model_flags(ablate_cmd, ab.m);

  IdeateArgs id;
  auto* ideate_cmd = app.add_subcommand("ideate", "Greedy ingredient-set expansion with attention rows");
  ideate_cmd->add_option("checkpoint", id.checkpoint)->required();
  ideate_cmd->add_option("--start", id.start, "Comma-separated start ingredients")->required();
  ideate_cmd->add_option("--steps", id.steps, "Automatic steps (ignored with --interactive)")->capture_default_str();
  ideate_cmd->add_option("--top-k", id.top_k, "Suggestions recorded per step")->capture_default_str();
  ideate_cmd->add_flag("--interactive", id.interactive, "Prompt for each pick");
  ideate_cmd->add_option("--exclude", id.exclude, "Comma-separated ingredients never suggested");
  ideate_cmd->add_option("--out", id.out, "Session JSON; empty to skip")->capture_default_str();

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Score one addition to one set");
  predict_cmd->add_option("checkpoint", pr.checkpoint)->required();
  predict_cmd->add_option("--set", pr.set, "Comma-separated ingredients")->required();
  predict_cmd->add_option("--addition", pr.addition)->required();

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP JSON service over a checkpoint");
  serve_cmd->add_option("checkpoint", sv.checkpoint)->required();
  serve_cmd->add_option("--addr", sv.addr)->capture_default_str();
  serve_cmd->add_option("--port", sv.port)->check(CLI::Range(0, 65535))->capture_default_str();
  serve_cmd->add_option("--sessions", sv.sessions, "Session snapshot restored on start and written on shutdown");

  attach_env(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen_cmd) run_generate(gen, *gen_cmd, g);
    if (*ingest_cmd) run_ingest(ingest, *ingest_cmd, g);
    if (*build_cmd) run_build(build, *build_cmd, g);
    if (*stats_cmd) run_stats(stats);
    if (*train_cmd) run_train(tr, *train_cmd, g);
    if (*eval_cmd) run_evaluate(ev, *eval_cmd, g);
    if (*ablate_cmd) run_ablate(ab, *ablate_cmd, g);
    if (*ideate_cmd) run_ideate(id, *ideate_cmd, g);
    if (*predict_cmd) run_predict(pr);
    if (*serve_cmd) return run_serve(sv, g);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
