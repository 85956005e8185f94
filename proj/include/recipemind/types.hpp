#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace recipemind {

using IngredientId = std::int32_t;
using Count = std::int64_t;

// Strictly ascending ingredient ids.
using IngredientSet = std::vector<IngredientId>;

// Bad input data: malformed files, unknown ingredients, broken preconditions
// on user-supplied sets. The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A count lookup hit a subset that is not in the counter.
class LookupError : public DataError {
 public:
  using DataError::DataError;
};

// Invalid configuration or parameter value.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Returns a sorted, deduplicated copy.
IngredientSet canonical_set(std::vector<IngredientId> ids);

bool is_canonical(const IngredientSet& ids);

std::string join_ids(const IngredientSet& ids, char sep = ',');

}  // namespace recipemind
