#include "recipemind/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "recipemind/fingerprint.hpp"

namespace recipemind {

IngredientSet canonical_set(std::vector<IngredientId> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

bool is_canonical(const IngredientSet& ids) {
  return std::adjacent_find(ids.begin(), ids.end(),
                            [](IngredientId a, IngredientId b) { return a >= b; }) == ids.end();
}

std::string join_ids(const IngredientSet& ids, char sep) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(sep);
    out += std::to_string(ids[i]);
  }
  return out;
}

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

template <typename Int>
Int parse_int(std::string_view text, const std::string& where) {
  Int value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw DataError(where + ": expected integer, got '" + std::string(text) + "'");
  }
  return value;
}

IngredientSet parse_id_list(std::string_view text, const std::string& where) {
  IngredientSet ids;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    ids.push_back(parse_int<IngredientId>(text.substr(start, comma - start), where));
    start = comma + 1;
  }
  if (!is_canonical(ids)) throw DataError(where + ": ids not strictly ascending");
  return ids;
}

}  // namespace

std::string normalize_ingredient_name(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char c : raw) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::vector<RecipeRecord> parse_corpus(std::istream& in) {
  std::vector<RecipeRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), is_space)) continue;
    const std::string where = "corpus line " + std::to_string(line_no);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("id") || !doc["id"].is_string() ||
        !doc.contains("ingredients") || !doc["ingredients"].is_array()) {
      throw DataError(where + ": expected {\"id\": string, \"ingredients\": [string, ...]}");
    }
    RecipeRecord record;
    record.id = doc["id"].get<std::string>();
    std::unordered_set<std::string> seen;
    for (const auto& item : doc["ingredients"]) {
      if (!item.is_string()) throw DataError(where + ": ingredient is not a string");
      std::string name = normalize_ingredient_name(item.get<std::string>());
      if (name.empty() || !seen.insert(name).second) continue;
      record.ingredients.push_back(std::move(name));
    }
    if (record.ingredients.empty()) {
      throw DataError(where + ": recipe '" + record.id + "' has no ingredients");
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<RecipeRecord> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  return parse_corpus(in);
}

// ---------------------------------------------------------------------------

IngredientVocabulary::IngredientVocabulary(std::vector<VocabularyEntry> entries)
    : entries_(std::move(entries)) {
  index_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id != static_cast<IngredientId>(i)) {
      throw DataError("vocabulary ids must be dense and ordered; entry " + std::to_string(i) +
                      " has id " + std::to_string(entries_[i].id));
    }
    if (!index_.emplace(entries_[i].name, entries_[i].id).second) {
      throw DataError("duplicate vocabulary name '" + entries_[i].name + "'");
    }
  }
}

const VocabularyEntry& IngredientVocabulary::entry(IngredientId id) const {
  if (!contains(id)) throw DataError("unknown ingredient id " + std::to_string(id));
  return entries_[static_cast<std::size_t>(id)];
}

bool IngredientVocabulary::contains(IngredientId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < entries_.size();
}

std::optional<IngredientId> IngredientVocabulary::find(std::string_view name) const {
  auto it = index_.find(normalize_ingredient_name(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

IngredientId IngredientVocabulary::id_of(std::string_view name) const {
  if (auto id = find(name)) return *id;
  throw DataError("unknown ingredient '" + std::string(name) + "'");
}

IngredientSet IngredientVocabulary::encode(const RecipeRecord& recipe) const {
  std::vector<IngredientId> ids;
  ids.reserve(recipe.ingredients.size());
  for (const auto& name : recipe.ingredients) {
    auto it = index_.find(name);
    if (it != index_.end()) ids.push_back(it->second);
  }
  return canonical_set(std::move(ids));
}

std::string IngredientVocabulary::fingerprint() const {
  std::string joined;
  for (const auto& e : entries_) {
    joined += e.name;
    joined.push_back('\n');
  }
  return sha256_hex(joined);
}

void IngredientVocabulary::write(std::ostream& out) const {
  out << "V=" << entries_.size() << '\n';
  for (const auto& e : entries_) out << e.id << '\t' << e.name << '\t' << e.count << '\n';
}

IngredientVocabulary IngredientVocabulary::read(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("V=")) {
    throw DataError("vocabulary: missing 'V=<count>' header");
  }
  const auto expected = parse_int<std::size_t>(std::string_view(line).substr(2), "vocabulary header");
  std::vector<VocabularyEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "vocabulary line " + std::to_string(line_no);
    auto t1 = line.find('\t');
    auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t1 == t2) throw DataError(where + ": expected id<TAB>name<TAB>count");
    VocabularyEntry e;
    e.id = parse_int<IngredientId>(std::string_view(line).substr(0, t1), where);
    e.name = line.substr(t1 + 1, t2 - t1 - 1);
    e.count = parse_int<Count>(std::string_view(line).substr(t2 + 1), where);
    entries.push_back(std::move(e));
  }
  if (entries.size() != expected) {
    throw DataError("vocabulary: header promises " + std::to_string(expected) + " entries, found " +
                    std::to_string(entries.size()));
  }
  return IngredientVocabulary(std::move(entries));
}

void IngredientVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write(out);
}

IngredientVocabulary IngredientVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  return read(in);
}

bool IngredientVocabulary::operator==(const IngredientVocabulary& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.id != b.id || a.count != b.count) return false;
  }
  return true;
}

IngredientVocabulary build_vocabulary(std::span<const RecipeRecord> recipes,
                                      Count min_ingredient_count) {
  std::map<std::string, Count> counts;
  for (const auto& recipe : recipes) {
    std::unordered_set<std::string_view> seen;
    for (const auto& name : recipe.ingredients) {
      if (seen.insert(name).second) ++counts[name];
    }
  }
  std::vector<VocabularyEntry> kept;
  for (const auto& [name, count] : counts) {
    if (count > min_ingredient_count) kept.push_back({name, 0, count});
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.name < b.name;
  });
  for (std::size_t i = 0; i < kept.size(); ++i) kept[i].id = static_cast<IngredientId>(i);
  return IngredientVocabulary(std::move(kept));
}

// ---------------------------------------------------------------------------

std::size_t SubsetHash::operator()(const IngredientSet& ids) const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ ids.size();
  for (IngredientId id : ids) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)) + 0x9e3779b97f4a7c15ULL +
         (h << 6) + (h >> 2);
  }
  return static_cast<std::size_t>(h);
}

std::optional<Count> SubsetCounter::find(const IngredientSet& subset) const {
  auto it = counts_.find(subset);
  if (it == counts_.end()) return std::nullopt;
  return it->second;
}

Count SubsetCounter::at(const IngredientSet& subset) const {
  auto it = counts_.find(subset);
  if (it == counts_.end()) {
    throw LookupError("subset {" + join_ids(subset) + "} is not in the counter");
  }
  return it->second;
}

void SubsetCounter::set(IngredientSet subset, Count count) {
  if (subset.empty() || !is_canonical(subset)) {
    throw ParameterError("counter keys must be non-empty strictly ascending id tuples");
  }
  counts_[std::move(subset)] = count;
}

void SubsetCounter::add(const IngredientSet& subset, Count count) {
  if (subset.empty() || !is_canonical(subset)) {
    throw ParameterError("counter keys must be non-empty strictly ascending id tuples");
  }
  counts_[subset] += count;
}

void SubsetCounter::merge(const SubsetCounter& other) {
  total_recipes_ += other.total_recipes_;
  for (const auto& [subset, count] : other.counts_) counts_[subset] += count;
}

std::size_t SubsetCounter::max_subset_size() const {
  std::size_t out = 0;
  for (const auto& entry : counts_) out = std::max(out, entry.first.size());
  return out;
}

std::vector<std::pair<IngredientSet, Count>> SubsetCounter::sorted_entries() const {
  std::vector<std::pair<IngredientSet, Count>> out(counts_.begin(), counts_.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.first.size() != b.first.size()) return a.first.size() < b.first.size();
    return a.first < b.first;
  });
  return out;
}

std::vector<IngredientSet> SubsetCounter::subsets_of_size(std::size_t n) const {
  std::vector<IngredientSet> out;
  for (const auto& entry : counts_) {
    if (entry.first.size() == n) out.push_back(entry.first);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void SubsetCounter::write(std::ostream& out) const {
  out << "R=" << total_recipes_ << '\n';
  for (const auto& [subset, count] : sorted_entries()) {
    out << join_ids(subset) << '\t' << count << '\n';
  }
}

SubsetCounter SubsetCounter::read(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("R=")) {
    throw DataError("counter: missing 'R=<int>' header");
  }
  SubsetCounter counter(parse_int<Count>(std::string_view(line).substr(2), "counter header"));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "counter line " + std::to_string(line_no);
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(where + ": expected ids<TAB>count");
    auto ids = parse_id_list(std::string_view(line).substr(0, tab), where);
    auto count = parse_int<Count>(std::string_view(line).substr(tab + 1), where);
    counter.counts_[std::move(ids)] = count;
  }
  return counter;
}

void SubsetCounter::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write(out);
}

SubsetCounter SubsetCounter::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open counter " + path.string());
  return read(in);
}

// ---------------------------------------------------------------------------

namespace {

using RawCounts = std::unordered_map<IngredientSet, Count, SubsetHash>;

// Counts the size-k subsets of each recipe whose every proper prefix of size
// >= 2 is already retained. Any subset above the support threshold passes
// this filter, since its prefixes occur at least as often.
void count_level_shard(std::span<const IngredientSet> recipes, std::size_t k,
                       const SubsetCounter& retained, RawCounts& out) {
  IngredientSet prefix;
  prefix.reserve(k);
  std::function<void(const IngredientSet&, std::size_t)> extend =
      [&](const IngredientSet& recipe, std::size_t start) {
        for (std::size_t i = start; i + (k - prefix.size()) <= recipe.size(); ++i) {
          prefix.push_back(recipe[i]);
          if (prefix.size() == k) {
            ++out[prefix];
          } else if (prefix.size() < 2 || retained.contains(prefix)) {
            extend(recipe, i + 1);
          }
          prefix.pop_back();
        }
      };
  for (const auto& recipe : recipes) {
    if (recipe.size() >= k) extend(recipe, 0);
  }
}

}  // namespace

SubsetCounter count_subsets(std::span<const RecipeRecord> recipes,
                            const IngredientVocabulary& vocab, const CountOptions& options) {
  if (options.max_size < 1) throw ParameterError("max_size must be >= 1");
  std::vector<IngredientSet> encoded;
  encoded.reserve(recipes.size());
  for (const auto& recipe : recipes) encoded.push_back(vocab.encode(recipe));

  SubsetCounter counter(static_cast<Count>(recipes.size()));
  std::vector<Count> singles(vocab.size(), 0);
  for (const auto& ids : encoded) {
    for (IngredientId id : ids) ++singles[static_cast<std::size_t>(id)];
  }
  for (std::size_t id = 0; id < singles.size(); ++id) {
    counter.set({static_cast<IngredientId>(id)}, singles[id]);
  }

  unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency())
                                          : options.threads;
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, encoded.size())));

  for (std::size_t k = 2; k <= options.max_size; ++k) {
    std::vector<RawCounts> shards(threads);
    const std::size_t chunk = (encoded.size() + threads - 1) / threads;
    auto run_shard = [&](unsigned t) {
      const std::size_t begin = std::min(encoded.size(), t * chunk);
      const std::size_t end = std::min(encoded.size(), begin + chunk);
      count_level_shard(std::span(encoded).subspan(begin, end - begin), k, counter, shards[t]);
    };
    if (threads == 1) {
      run_shard(0);
    } else {
      std::vector<std::jthread> workers;
      for (unsigned t = 0; t < threads; ++t) workers.emplace_back(run_shard, t);
    }
    RawCounts merged = std::move(shards[0]);
    for (unsigned t = 1; t < threads; ++t) {
      for (const auto& [subset, count] : shards[t]) merged[subset] += count;
    }
    bool any = false;
    for (auto& [subset, count] : merged) {
      if (count > options.min_subset_count) {
        counter.set(subset, count);
        any = true;
      }
    }
    if (!any) break;
  }
  return counter;
}

}  // namespace recipemind
