#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "recipemind/corpus.hpp"
#include "recipemind/model.hpp"
#include "recipemind/nn/adam.hpp"

namespace recipemind {

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class FingerprintMismatch : public DataError {
 public:
  using DataError::DataError;
};

struct OptimizerSnapshot {
  nn::AdamConfig config;
  std::uint64_t steps = 0;
  std::vector<nn::Tensor> first_moments;
  std::vector<nn::Tensor> second_moments;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  RecipeMind model;
  IngredientVocabulary vocabulary;
  std::uint64_t training_seed = 0;
  std::optional<OptimizerSnapshot> optimizer;
  nlohmann::json metadata = nlohmann::json::object();
};

enum class FingerprintPolicy { reject, warn, ignore };

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// every parameter (and optimizer moment, if present) as little-endian
// float64 blobs in header order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

// When `expected_vocabulary_fingerprint` is given and differs from the stored
// one, `policy` decides: reject throws FingerprintMismatch, warn logs to
// stderr.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_vocabulary_fingerprint = {},
                           FingerprintPolicy policy = FingerprintPolicy::reject);

}  // namespace recipemind
