#include "recipemind/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "recipemind/random.hpp"
#include "recipemind/stats.hpp"

namespace recipemind {

void ScoreParams::validate() const {
  if (!(delta > 0.0 && delta <= 1.0)) {
    throw ParameterError("delta must lie in (0, 1], got " + std::to_string(delta));
  }
}

double spmir(Count r_union, Count r_set, Count r_add, Count total_recipes,
             const ScoreParams& params) {
  params.validate();
  if (total_recipes < 1 || r_set < 1 || r_add < 1) {
    throw ParameterError("spmir needs R, r(S) and r({i}) >= 1");
  }
  if (r_union > std::min(r_set, r_add)) {
    throw ParameterError("spmir: r(S u {i}) exceeds r(S) or r({i})");
  }
  if (r_union < 1) throw DataError("spmir: zero co-occurrence has no finite score");

  const double set = static_cast<double>(r_set);
  const double add = static_cast<double>(r_add);
  const double expected = set * add / static_cast<double>(total_recipes);
  const double correction = std::sqrt(std::max(set, add) * std::sqrt(std::log(params.delta) / -2.0));
  return std::log10(static_cast<double>(r_union) / (expected + correction));
}

IngredientSet AffinityInstance::union_set() const {
  IngredientSet out = set_ids;
  out.insert(std::upper_bound(out.begin(), out.end(), addition_id), addition_id);
  return out;
}

AffinityInstance score_instance(const SubsetCounter& counter, const IngredientSet& set_ids,
                                IngredientId addition_id, const ScoreParams& params) {
  if (set_ids.empty() || !is_canonical(set_ids)) {
    throw ParameterError("set ids must be a non-empty strictly ascending tuple");
  }
  if (std::binary_search(set_ids.begin(), set_ids.end(), addition_id)) {
    throw DataError("addition " + std::to_string(addition_id) + " is already in {" +
                    join_ids(set_ids) + "}");
  }
  AffinityInstance instance{set_ids, addition_id, 0.0};
  const Count r_union = counter.at(instance.union_set());
  const Count r_set = counter.at(set_ids);
  const Count r_add = counter.at({addition_id});
  instance.score = spmir(r_union, r_set, r_add, counter.total_recipes(), params);
  return instance;
}

void sort_instances(std::vector<AffinityInstance>& instances) {
  std::sort(instances.begin(), instances.end(), [](const auto& a, const auto& b) {
    if (a.set_ids.size() != b.set_ids.size()) return a.set_ids.size() < b.set_ids.size();
    if (a.set_ids != b.set_ids) return a.set_ids < b.set_ids;
    return a.addition_id < b.addition_id;
  });
}

BuiltInstances build_instances(const SubsetCounter& counter,
                               const std::set<std::size_t>& trainable_sizes,
                               const std::set<std::size_t>& test_only_sizes,
                               const ScoreParams& params) {
  params.validate();
  BuiltInstances out;
  auto emit = [&](std::size_t n, std::vector<AffinityInstance>& sink) {
    for (const auto& subset : counter.subsets_of_size(n)) {
      for (std::size_t drop = 0; drop < subset.size(); ++drop) {
        IngredientSet rest;
        rest.reserve(subset.size() - 1);
        for (std::size_t j = 0; j < subset.size(); ++j) {
          if (j != drop) rest.push_back(subset[j]);
        }
        if (!counter.contains(rest)) {
          ++out.skipped;
          continue;
        }
        sink.push_back(score_instance(counter, rest, subset[drop], params));
      }
    }
  };
  for (std::size_t n : trainable_sizes) {
    if (n >= 2) emit(n, out.trainable);
  }
  for (std::size_t n : test_only_sizes) {
    if (n >= 2) emit(n, out.test_only[n]);
  }
  sort_instances(out.trainable);
  for (auto& [n, v] : out.test_only) sort_instances(v);
  return out;
}

void SplitRatios::validate() const {
  if (!(train > 0.0 && validation > 0.0 && test > 0.0)) {
    throw ParameterError("split ratios must be positive");
  }
  if (std::abs(train + validation + test - 1.0) > 1e-9) {
    throw ParameterError("split ratios must sum to 1");
  }
}

Partition assign_partition(const IngredientSet& union_set, const SplitRatios& ratios,
                           std::uint64_t seed) {
  std::uint64_t h = mix64(seed ^ 0x73706c6974ULL);
  for (IngredientId id : union_set) h = hash_combine(h, static_cast<std::uint64_t>(id));
  h = hash_combine(h, union_set.size());
  const double u = to_unit(h);
  if (u < ratios.train) return Partition::train;
  if (u < ratios.train + ratios.validation) return Partition::validation;
  return Partition::test;
}

DatasetSplit split_by_subset(std::vector<AffinityInstance> instances, const SplitRatios& ratios,
                             std::uint64_t seed, const std::set<std::size_t>& test_only_sizes) {
  ratios.validate();
  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  for (auto& instance : instances) {
    const std::size_t n = instance.union_size();
    if (test_only_sizes.contains(n)) {
      split.test_only_sizes[n].push_back(std::move(instance));
      continue;
    }
    switch (assign_partition(instance.union_set(), ratios, seed)) {
      case Partition::train: split.train.push_back(std::move(instance)); break;
      case Partition::validation: split.validation.push_back(std::move(instance)); break;
      case Partition::test: split.test.push_back(std::move(instance)); break;
    }
  }
  sort_instances(split.train);
  sort_instances(split.validation);
  sort_instances(split.test);
  for (auto& [n, v] : split.test_only_sizes) sort_instances(v);
  return split;
}

// ---------------------------------------------------------------------------

void write_instances(std::ostream& out, std::span<const AffinityInstance> instances) {
  char score[40];
  for (const auto& instance : instances) {
    std::snprintf(score, sizeof(score), "%.17g", instance.score);
    out << join_ids(instance.set_ids) << '\t' << instance.addition_id << '\t' << score << '\n';
  }
}

std::vector<AffinityInstance> read_instances(std::istream& in) {
  std::vector<AffinityInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "instance line " + std::to_string(line_no);
    std::istringstream fields(line);
    std::string ids_text, addition_text, score_text;
    if (!std::getline(fields, ids_text, '\t') || !std::getline(fields, addition_text, '\t') ||
        !std::getline(fields, score_text)) {
      throw DataError(where + ": expected set<TAB>addition<TAB>score");
    }
    AffinityInstance instance;
    try {
      std::istringstream ids(ids_text);
      std::string token;
      while (std::getline(ids, token, ',')) instance.set_ids.push_back(std::stoi(token));
      std::size_t used = 0;
      instance.addition_id = std::stoi(addition_text, &used);
      if (used != addition_text.size()) throw std::invalid_argument("addition");
      instance.score = std::stod(score_text, &used);
      if (used != score_text.size()) throw std::invalid_argument("score");
    } catch (const std::logic_error&) {
      throw DataError(where + ": malformed field");
    }
    if (instance.set_ids.empty() || !is_canonical(instance.set_ids) ||
        std::binary_search(instance.set_ids.begin(), instance.set_ids.end(), instance.addition_id) ||
        !std::isfinite(instance.score)) {
      throw DataError(where + ": invalid instance");
    }
    out.push_back(std::move(instance));
  }
  return out;
}

void save_instances(const std::filesystem::path& path, std::span<const AffinityInstance> instances) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_instances(out, instances);
}

std::vector<AffinityInstance> load_instances(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open instances " + path.string());
  return read_instances(in);
}

nlohmann::json DatasetSplit::manifest() const {
  nlohmann::json counts = {{"train", train.size()},
                           {"validation", validation.size()},
                           {"test", test.size()}};
  nlohmann::json test_only = nlohmann::json::object();
  for (const auto& [n, v] : test_only_sizes) test_only[std::to_string(n)] = v.size();
  counts["test_only_sizes"] = test_only;
  return {{"seed", seed},
          {"ratios", {ratios.train, ratios.validation, ratios.test}},
          {"counts", counts}};
}

void DatasetSplit::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_instances(dir / "train.tsv", train);
  save_instances(dir / "validation.tsv", validation);
  save_instances(dir / "test.tsv", test);
  for (const auto& [n, v] : test_only_sizes) {
    save_instances(dir / ("test_size" + std::to_string(n) + ".tsv"), v);
  }
  std::ofstream out(dir / "split.json");
  out << manifest().dump(2) << '\n';
}

DatasetSplit DatasetSplit::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "split.json");
  if (!in) throw DataError("missing split manifest in " + dir.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split.json: " + std::string(e.what()));
  }
  DatasetSplit split;
  try {
    split.seed = doc.at("seed").get<std::uint64_t>();
    const auto& r = doc.at("ratios");
    split.ratios = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    split.train = load_instances(dir / "train.tsv");
    split.validation = load_instances(dir / "validation.tsv");
    split.test = load_instances(dir / "test.tsv");
    for (const auto& [key, value] : doc.at("counts").at("test_only_sizes").items()) {
      const std::size_t n = std::stoul(key);
      split.test_only_sizes[n] = load_instances(dir / ("test_size" + key + ".tsv"));
      if (split.test_only_sizes[n].size() != value.get<std::size_t>()) {
        throw DataError("test_size" + key + ".tsv does not match split.json");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split.json: " + std::string(e.what()));
  }
  return split;
}

// ---------------------------------------------------------------------------

std::vector<SizeSummary> score_distribution_stats(std::span<const AffinityInstance> instances,
                                                  std::size_t bins) {
  if (bins == 0) throw ParameterError("histogram needs at least one bin");
  std::map<std::size_t, std::vector<double>> groups;
  for (const auto& instance : instances) groups[instance.union_size()].push_back(instance.score);
  std::vector<SizeSummary> out;
  for (const auto& [n, scores] : groups) {
    SizeSummary s;
    s.union_size = n;
    s.count = scores.size();
    s.mean = stats::mean(scores);
    s.median = stats::median(scores);
    s.std = stats::population_std(scores);
    auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    s.histogram.lo = *lo;
    s.histogram.hi = *hi;
    s.histogram.bins.assign(bins, 0);
    const double width = *hi - *lo;
    for (double v : scores) {
      std::size_t b = 0;
      if (width > 0.0) {
        b = std::min(bins - 1, static_cast<std::size_t>((v - *lo) / width * static_cast<double>(bins)));
      }
      ++s.histogram.bins[b];
    }
    out.push_back(std::move(s));
  }
  return out;
}

void print_score_stats(std::ostream& out, std::span<const SizeSummary> summaries) {
  out << std::left << std::setw(6) << "size" << std::right << std::setw(10) << "count"
      << std::setw(11) << "mean" << std::setw(11) << "median" << std::setw(10) << "std"
      << std::setw(11) << "min" << std::setw(11) << "max" << "  histogram\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& s : summaries) {
    out << std::left << std::setw(6) << s.union_size << std::right << std::setw(10) << s.count
        << std::setw(11) << s.mean << std::setw(11) << s.median << std::setw(10) << s.std
        << std::setw(11) << s.histogram.lo << std::setw(11) << s.histogram.hi << "  ";
    for (std::size_t i = 0; i < s.histogram.bins.size(); ++i) {
      out << (i ? " " : "") << s.histogram.bins[i];
    }
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

}  // namespace recipemind
