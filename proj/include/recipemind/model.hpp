#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "recipemind/corpus.hpp"
#include "recipemind/nn/layers.hpp"
#include "recipemind/types.hpp"

namespace recipemind {

enum class Pooling { sum, pma, mean, max };
enum class EncoderVariant { cascaded_pmx, shared_sab, deep_sets };

std::string to_string(Pooling pooling);
std::string to_string(EncoderVariant variant);
Pooling parse_pooling(const std::string& name);
EncoderVariant parse_encoder_variant(const std::string& name);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 300;
  std::size_t hidden_dim = 128;
  std::size_t num_blocks = 3;
  std::size_t heads = 8;
  double dropout_p = 0.025;
  std::size_t rff_depth = 3;
  Pooling pooling = Pooling::sum;
  EncoderVariant encoder = EncoderVariant::cascaded_pmx;
  double layer_norm_eps = 1e-5;
  // Rows come from a pretrained file and are frozen during training.
  bool pretrained_embeddings = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& doc);
  bool operator==(const ModelConfig&) const = default;
};

// Ablation names: default, shared_sab, deep_sets, pma, mean, max.
const std::vector<std::string>& variant_names();
ModelConfig variant_config(const std::string& name, ModelConfig base);

// Multihead attention block with both residual branches as
//   H   = LayerNorm(X + RFF_attn(MultiAttn(X, Y, Y)))
//   out = LayerNorm(H + RFF_in(X))
// SAB(X) = block(X, X); PMX(a, S) = block(a, S).
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const std::string& name, const ModelConfig& config, CounterRng& init);

  // x: (groups*nq) x h, y: (groups*nk) x h.
  nn::Var forward(nn::Tape& tape, nn::Var x, nn::Var y, std::size_t groups,
                  nn::AttentionWeights* capture = nullptr) const;
  void collect(std::vector<nn::Parameter*>& out);

  nn::MultiheadAttention attention;
  nn::FeedForward attention_ff;
  nn::FeedForward input_ff;
  nn::LayerNorm inner_norm;
  nn::LayerNorm outer_norm;
};

// Intermediate states of a forward pass; groups stacked row-wise for batches.
struct ForwardActivations {
  std::vector<nn::Tensor> set_states;       // S_0 .. S_L
  std::vector<nn::Tensor> addition_states;  // a_0 .. a_L (a_0 only for non-cascaded variants)
  nn::Tensor set_context;                   // S_C
  nn::Tensor addition_context;              // a_C
  std::vector<double> scores;
  std::vector<nn::AttentionWeights> set_attention;    // one per SAB
  std::vector<nn::AttentionWeights> cross_attention;  // one per PMX
};

struct ForwardOptions {
  bool training = false;
  // Dropout masks derive from (dropout_seed, step, site).
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;
};

enum class Mode { train, eval };

class RecipeMind {
 public:
  RecipeMind() = default;
  RecipeMind(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  bool has_cross_attention() const { return config_.encoder == EncoderVariant::cascaded_pmx; }

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  std::size_t parameter_count() const;
  nn::Parameter* find_parameter(const std::string& name);

  // Replaces the embedding table with frozen pretrained rows.
  void use_pretrained_embeddings(nn::Tensor table);

  // `sets` holds `additions.size()` sets of `set_size` ids each, flattened.
  // Returns a (batch x 1) column of predicted scores.
  nn::Var forward_batch(nn::Tape& tape, std::span<const IngredientId> sets, std::size_t set_size,
                        std::span<const IngredientId> additions, const ForwardOptions& options,
                        ForwardActivations* activations = nullptr) const;

  // Single prediction. `set` may be in any order but must hold distinct ids.
  std::pair<double, ForwardActivations> forward(std::span<const IngredientId> set,
                                                IngredientId addition, Mode mode = Mode::eval,
                                                std::uint64_t dropout_seed = 0) const;

  // Eval-mode scores for many additions to one set, in one batch.
  std::vector<double> score_additions(std::span<const IngredientId> set,
                                      std::span<const IngredientId> additions) const;

 private:
  void validate_inputs(std::span<const IngredientId> sets, std::size_t set_size,
                       std::span<const IngredientId> additions) const;
  nn::Var pool(nn::Tape& tape, nn::Var states, std::size_t set_size, std::size_t groups) const;

  ModelConfig config_;
  nn::Parameter embedding_;
  nn::Linear shared_in_;
  nn::Linear shared_out_;
  std::vector<AttentionBlock> set_blocks_;
  std::vector<AttentionBlock> cross_blocks_;
  nn::Parameter pma_seed_;
  AttentionBlock pma_block_;
  nn::Linear score_hidden_;
  nn::Linear score_out_;
};

// Text format: header "<count> <dim>", then "name v1 ... v_dim" per line.
// Names may contain spaces; the trailing `dim` tokens are the vector. Returns
// a vocabulary-aligned table; every vocabulary name must be present.
nn::Tensor load_embedding_file(const std::filesystem::path& path, const IngredientVocabulary& vocab);

}  // namespace recipemind
