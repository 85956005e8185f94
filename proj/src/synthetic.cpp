#include "recipemind/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "recipemind/random.hpp"

namespace recipemind {

std::string planted_ingredient_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ingredient %03zu", index);
  return buf;
}

std::size_t planted_cluster_of(std::size_t index, const PlantedCorpusOptions& options) {
  const std::size_t per_cluster = options.ingredients / options.clusters;
  return std::min(index / per_cluster, options.clusters - 1);
}

std::vector<RecipeRecord> generate_planted_corpus(const PlantedCorpusOptions& options) {
  if (options.clusters == 0 || options.ingredients < options.clusters ||
      options.min_recipe_size == 0 || options.min_recipe_size > options.max_recipe_size ||
      options.max_recipe_size > options.ingredients) {
    throw ParameterError("inconsistent planted corpus options");
  }
  CounterRng rng(options.seed, 0x5eed);

  std::vector<std::vector<std::size_t>> members(options.clusters);
  for (std::size_t i = 0; i < options.ingredients; ++i) {
    members[planted_cluster_of(i, options)].push_back(i);
  }
  // Zipf-like popularity inside each cluster.
  std::vector<double> weight(options.ingredients);
  for (const auto& cluster : members) {
    for (std::size_t rank = 0; rank < cluster.size(); ++rank) {
      weight[cluster[rank]] = 1.0 / (1.0 + 0.35 * static_cast<double>(rank));
    }
  }

  auto pick_weighted = [&](const std::vector<std::size_t>& pool) {
    double total = 0.0;
    for (auto i : pool) total += weight[i];
    double target = rng.uniform() * total;
    for (auto i : pool) {
      target -= weight[i];
      if (target < 0.0) return i;
    }
    return pool.back();
  };

  std::vector<RecipeRecord> recipes;
  recipes.reserve(options.recipes);
  for (std::size_t r = 0; r < options.recipes; ++r) {
    const auto& cluster = members[rng.below(options.clusters)];
    const std::size_t size =
        options.min_recipe_size + rng.below(options.max_recipe_size - options.min_recipe_size + 1);
    std::vector<std::size_t> chosen;
    while (chosen.size() < size) {
      const bool cluster_full = std::all_of(cluster.begin(), cluster.end(), [&](std::size_t i) {
        return std::find(chosen.begin(), chosen.end(), i) != chosen.end();
      });
      std::size_t pick = !cluster_full && rng.uniform() < options.in_cluster_probability
                             ? pick_weighted(cluster)
                             : rng.below(options.ingredients);
      if (std::find(chosen.begin(), chosen.end(), pick) == chosen.end()) chosen.push_back(pick);
    }
    RecipeRecord record;
    record.id = "planted-" + std::to_string(r);
    for (auto i : chosen) record.ingredients.push_back(planted_ingredient_name(i));
    recipes.push_back(std::move(record));
  }
  return recipes;
}

}  // namespace recipemind
