#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <vector>

#include <json.hpp>

#include "recipemind/corpus.hpp"
#include "recipemind/types.hpp"

namespace recipemind {

struct ScoreParams {
  // Significance parameter, 0 < delta <= 1.
  double delta = 0.2;

  void validate() const;
};

// Significant PMI over recipe counts, base-10:
//   log10( r_union / ( r_set*r_add/R + sqrt( max(r_set, r_add) * sqrt(ln(delta) / -2) ) ) )
// Zero co-occurrence has no finite score and is rejected.
double spmir(Count r_union, Count r_set, Count r_add, Count total_recipes,
             const ScoreParams& params = {});

struct AffinityInstance {
  IngredientSet set_ids;
  IngredientId addition_id = 0;
  double score = 0.0;

  IngredientSet union_set() const;
  std::size_t union_size() const { return set_ids.size() + 1; }

  bool operator==(const AffinityInstance&) const = default;
};

// Scores adding `addition_id` to `set_ids` from the counter's r(.) values.
AffinityInstance score_instance(const SubsetCounter& counter, const IngredientSet& set_ids,
                                IngredientId addition_id, const ScoreParams& params = {});

struct BuiltInstances {
  std::vector<AffinityInstance> trainable;
  // Keyed by union size.
  std::map<std::size_t, std::vector<AffinityInstance>> test_only;
  // Leave-one-out remainders missing from the counter.
  std::size_t skipped = 0;
};

// Every retained subset of size n yields n leave-one-out instances. Output is
// in canonical order (see sort_instances).
BuiltInstances build_instances(const SubsetCounter& counter,
                               const std::set<std::size_t>& trainable_sizes = {2, 3, 4},
                               const std::set<std::size_t>& test_only_sizes = {5, 6, 7},
                               const ScoreParams& params = {});

// Orders by union size, then set ids, then addition id.
void sort_instances(std::vector<AffinityInstance>& instances);

struct SplitRatios {
  double train = 0.8;
  double validation = 0.05;
  double test = 0.15;

  void validate() const;
};

enum class Partition { train, validation, test };

// Seeded hash of the canonical union subset, mapped onto ratio buckets.
Partition assign_partition(const IngredientSet& union_set, const SplitRatios& ratios,
                           std::uint64_t seed);

struct DatasetSplit {
  std::vector<AffinityInstance> train;
  std::vector<AffinityInstance> validation;
  std::vector<AffinityInstance> test;
  // Instances of union sizes never used for training, keyed by union size.
  std::map<std::size_t, std::vector<AffinityInstance>> test_only_sizes;
  SplitRatios ratios;
  std::uint64_t seed = 0;

  nlohmann::json manifest() const;
  // train.tsv, validation.tsv, test.tsv, test_size<n>.tsv and split.json.
  void save(const std::filesystem::path& dir) const;
  static DatasetSplit load(const std::filesystem::path& dir);
};

DatasetSplit split_by_subset(std::vector<AffinityInstance> instances, const SplitRatios& ratios,
                             std::uint64_t seed,
                             const std::set<std::size_t>& test_only_sizes = {5, 6, 7});

// TSV: comma-joined set ids, addition id, score with 17 significant digits.
void write_instances(std::ostream& out, std::span<const AffinityInstance> instances);
std::vector<AffinityInstance> read_instances(std::istream& in);
void save_instances(const std::filesystem::path& path, std::span<const AffinityInstance> instances);
std::vector<AffinityInstance> load_instances(const std::filesystem::path& path);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> bins;
};

struct SizeSummary {
  std::size_t union_size = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  // population
  Histogram histogram;
};

std::vector<SizeSummary> score_distribution_stats(std::span<const AffinityInstance> instances,
                                                  std::size_t bins = 10);
void print_score_stats(std::ostream& out, std::span<const SizeSummary> summaries);

}  // namespace recipemind
