#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "recipemind/corpus.hpp"
#include "recipemind/model.hpp"
#include "recipemind/types.hpp"

namespace recipemind {

// Raised when a model variant has no cross-attention to explain with.
class UnsupportedExplanation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Anything that scores "add candidate to set". Implementations must be safe
// for concurrent const calls.
class CandidateScorer {
 public:
  virtual ~CandidateScorer() = default;
  virtual std::size_t vocabulary_size() const = 0;
  virtual std::vector<double> score(std::span<const IngredientId> set,
                                    std::span<const IngredientId> candidates) const = 0;
  // Weights of `addition` over the positions of `set`; may throw
  // UnsupportedExplanation.
  virtual std::vector<double> attention(std::span<const IngredientId> set, IngredientId addition) const = 0;
};

// Scores candidates in fixed-size chunks so results do not depend on the
// thread count.
class ModelScorer : public CandidateScorer {
 public:
  static constexpr std::size_t kChunk = 256;

  explicit ModelScorer(const RecipeMind& model, unsigned threads = 1) : model_(model), threads_(threads) {}

  std::size_t vocabulary_size() const override { return model_.config().vocab_size; }
  std::vector<double> score(std::span<const IngredientId> set,
                            std::span<const IngredientId> candidates) const override;
  std::vector<double> attention(std::span<const IngredientId> set, IngredientId addition) const override;

 private:
  const RecipeMind& model_;
  unsigned threads_;
};

// A scorer backed by plain functions, for fixtures and tests. Without an
// attention function the weights are uniform.
class FunctionScorer : public CandidateScorer {
 public:
  using ScoreFn = std::function<double(std::span<const IngredientId>, IngredientId)>;
  using AttentionFn = std::function<std::vector<double>(std::span<const IngredientId>, IngredientId)>;

  FunctionScorer(std::size_t vocabulary_size, ScoreFn score, AttentionFn attention = {})
      : size_(vocabulary_size), score_(std::move(score)), attention_(std::move(attention)) {}

  std::size_t vocabulary_size() const override { return size_; }
  std::vector<double> score(std::span<const IngredientId> set,
                            std::span<const IngredientId> candidates) const override;
  std::vector<double> attention(std::span<const IngredientId> set, IngredientId addition) const override;

 private:
  std::size_t size_;
  ScoreFn score_;
  AttentionFn attention_;
};

// Head-averaged weights of the last cross-attention block for the first
// group in `activations`, indexed by set position.
std::vector<double> extract_attention(const ForwardActivations& activations);

struct Recommendation {
  IngredientId id = 0;
  double score = 0.0;

  bool operator==(const Recommendation&) const = default;
};

// Top-k candidates outside `set` and `exclude`, by descending score, ties by
// ascending id.
std::vector<Recommendation> recommend(const CandidateScorer& scorer, std::span<const IngredientId> set,
                                      std::size_t k, std::span<const IngredientId> exclude = {});

struct IdeationStep {
  std::size_t index = 0;  // 1-based
  std::vector<IngredientId> set_before;
  std::vector<IngredientId> exclude;
  std::vector<Recommendation> recommendations;
  IngredientId chosen = 0;
  double chosen_score = 0.0;
  bool automatic = false;
  // Aligned with set_before; absent when the model cannot explain.
  std::optional<std::vector<double>> attention;
};

struct IdeationSession {
  std::string id;
  std::vector<IngredientId> initial_set;
  std::vector<IdeationStep> steps;
  std::string checkpoint_fingerprint;
  std::string created_at;
  std::size_t top_k = 3;

  // Initial set followed by every chosen ingredient, in order.
  std::vector<IngredientId> current_set() const;

  nlohmann::json to_json(const IngredientVocabulary& vocab) const;
  static IdeationSession from_json(const nlohmann::json& doc, const IngredientVocabulary& vocab);
};

// Validates the start set (non-empty, known, distinct ids).
IdeationSession start_session(const CandidateScorer& scorer, std::vector<IngredientId> start_set,
                              std::size_t top_k = 3, std::string id = {}, std::string fingerprint = {});

// Appends one step. `choice` empty means take the top-ranked candidate.
// Throws DataError for an illegal choice or when no candidate is left.
const IdeationStep& step(IdeationSession& session, const CandidateScorer& scorer,
                         std::optional<IngredientId> choice = std::nullopt,
                         std::span<const IngredientId> exclude = {});

IdeationSession auto_ideate(const CandidateScorer& scorer, std::vector<IngredientId> start_set,
                            std::size_t n_steps, std::size_t top_k = 3);

// Re-runs the session's choices against `scorer` from its initial set.
IdeationSession replay(const IdeationSession& session, const CandidateScorer& scorer);

// Largest absolute difference over recommendation scores, chosen scores and
// attention weights. Throws DataError when the traces differ structurally
// (different choices, ranks, or lengths).
double max_trace_difference(const IdeationSession& a, const IdeationSession& b);

// Step table with the top three candidates per step, then the attention rows.
void print_session_table(std::ostream& out, const IdeationSession& session, const IngredientVocabulary& vocab);

}  // namespace recipemind
