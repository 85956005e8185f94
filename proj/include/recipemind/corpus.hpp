#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recipemind/types.hpp"

namespace recipemind {

struct RecipeRecord {
  std::string id;
  // Normalized names, first-occurrence order, no duplicates.
  std::vector<std::string> ingredients;
};

// Lowercases ASCII letters, trims, and collapses inner whitespace runs to one
// space. Non-ASCII bytes pass through untouched.
std::string normalize_ingredient_name(std::string_view raw);

// One JSON object per line: {"id": "...", "ingredients": ["...", ...]}.
// Blank lines are skipped. Errors carry the 1-based line number.
std::vector<RecipeRecord> parse_corpus(std::istream& in);
std::vector<RecipeRecord> load_corpus(const std::filesystem::path& path);

struct VocabularyEntry {
  std::string name;
  IngredientId id = 0;
  Count count = 0;
};

class IngredientVocabulary {
 public:
  IngredientVocabulary() = default;
  // Entries must carry dense ids 0..n-1 in order and unique names.
  explicit IngredientVocabulary(std::vector<VocabularyEntry> entries);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<VocabularyEntry>& entries() const { return entries_; }
  const VocabularyEntry& entry(IngredientId id) const;
  const std::string& name(IngredientId id) const { return entry(id).name; }

  std::optional<IngredientId> find(std::string_view name) const;
  // Throws DataError for names outside the vocabulary. The name is normalized
  // before lookup.
  IngredientId id_of(std::string_view name) const;
  bool contains(IngredientId id) const;

  // Known ingredients of a recipe as a canonical id set.
  IngredientSet encode(const RecipeRecord& recipe) const;

  // SHA-256 over the id-ordered names; identifies a vocabulary across files.
  std::string fingerprint() const;

  void write(std::ostream& out) const;
  static IngredientVocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static IngredientVocabulary load(const std::filesystem::path& path);

  bool operator==(const IngredientVocabulary& other) const;

 private:
  std::vector<VocabularyEntry> entries_;
  std::unordered_map<std::string, IngredientId> index_;
};

// Keeps names whose recipe count exceeds min_ingredient_count. Ids follow
// descending count, then ascending name.
IngredientVocabulary build_vocabulary(std::span<const RecipeRecord> recipes,
                                      Count min_ingredient_count = 20);

struct SubsetHash {
  std::size_t operator()(const IngredientSet& ids) const noexcept;
};

// Recipe-occurrence counts r(X) for canonical ingredient subsets, plus the
// corpus size R.
class SubsetCounter {
 public:
  SubsetCounter() = default;
  explicit SubsetCounter(Count total_recipes) : total_recipes_(total_recipes) {}

  Count total_recipes() const { return total_recipes_; }
  std::size_t size() const { return counts_.size(); }

  std::optional<Count> find(const IngredientSet& subset) const;
  // Throws LookupError naming the subset when it is absent.
  Count at(const IngredientSet& subset) const;
  bool contains(const IngredientSet& subset) const { return counts_.contains(subset); }

  void set(IngredientSet subset, Count count);
  void add(const IngredientSet& subset, Count count);
  // Element-wise addition of counts and recipe totals.
  void merge(const SubsetCounter& other);

  std::size_t max_subset_size() const;
  // Canonically ordered: by size, then lexicographically.
  std::vector<std::pair<IngredientSet, Count>> sorted_entries() const;
  std::vector<IngredientSet> subsets_of_size(std::size_t n) const;

  // Header "R=<int>", then "id1,id2,...<TAB>count" in canonical order.
  void write(std::ostream& out) const;
  static SubsetCounter read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static SubsetCounter load(const std::filesystem::path& path);

  bool operator==(const SubsetCounter& other) const = default;

 private:
  Count total_recipes_ = 0;
  std::unordered_map<IngredientSet, Count, SubsetHash> counts_;
};

struct CountOptions {
  std::size_t max_size = 7;
  Count min_subset_count = 5;
  // Worker threads for shard counting; 0 picks hardware concurrency.
  unsigned threads = 1;
};

// Level-wise (Apriori) counting. Singletons of every vocabulary id are always
// stored; larger subsets only when their count exceeds min_subset_count.
SubsetCounter count_subsets(std::span<const RecipeRecord> recipes,
                            const IngredientVocabulary& vocab,
                            const CountOptions& options = {});

}  // namespace recipemind
