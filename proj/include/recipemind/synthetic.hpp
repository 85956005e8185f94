#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "recipemind/corpus.hpp"

namespace recipemind {

// A corpus with planted "cuisine" structure: ingredients are split into
// contiguous clusters, and each recipe draws most of its ingredients from one
// cluster, with per-ingredient popularity varying inside the cluster.
struct PlantedCorpusOptions {
  std::size_t recipes = 2000;
  std::size_t ingredients = 60;
  std::size_t clusters = 6;
  std::size_t min_recipe_size = 4;
  std::size_t max_recipe_size = 8;
  double in_cluster_probability = 0.85;
  std::uint64_t seed = 7;
};

std::string planted_ingredient_name(std::size_t index);
std::size_t planted_cluster_of(std::size_t index, const PlantedCorpusOptions& options);

std::vector<RecipeRecord> generate_planted_corpus(const PlantedCorpusOptions& options);

}  // namespace recipemind
