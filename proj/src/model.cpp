#include "recipemind/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace recipemind {

using nn::Parameter;
using nn::Tape;
using nn::Tensor;
using nn::Var;

namespace {

constexpr std::uint64_t kSiteSharedIn = 1;
constexpr std::uint64_t kSiteSharedOut = 2;
constexpr std::uint64_t kSiteScore = 3;

CounterRng dropout_stream(const ForwardOptions& options, std::uint64_t site) {
  return CounterRng(options.dropout_seed, hash_combine(options.step, site));
}

}  // namespace

std::string to_string(Pooling pooling) {
  switch (pooling) {
    case Pooling::sum: return "sum";
    case Pooling::pma: return "pma";
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
  }
  return "?";
}

std::string to_string(EncoderVariant variant) {
  switch (variant) {
    case EncoderVariant::cascaded_pmx: return "cascaded_pmx";
    case EncoderVariant::shared_sab: return "shared_sab";
    case EncoderVariant::deep_sets: return "deep_sets";
  }
  return "?";
}

Pooling parse_pooling(const std::string& name) {
  if (name == "sum") return Pooling::sum;
  if (name == "pma") return Pooling::pma;
  if (name == "mean") return Pooling::mean;
  if (name == "max") return Pooling::max;
  throw ParameterError("unknown pooling '" + name + "'");
}

EncoderVariant parse_encoder_variant(const std::string& name) {
  if (name == "cascaded_pmx") return EncoderVariant::cascaded_pmx;
  if (name == "shared_sab") return EncoderVariant::shared_sab;
  if (name == "deep_sets") return EncoderVariant::deep_sets;
  throw ParameterError("unknown encoder variant '" + name + "'");
}

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ParameterError("model needs a non-empty vocabulary");
  if (embed_dim == 0 || hidden_dim == 0) throw ParameterError("model widths must be positive");
  if (heads == 0 || hidden_dim % heads != 0) {
    throw ParameterError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (num_blocks == 0) throw ParameterError("num_blocks must be >= 1");
  if (rff_depth == 0) throw ParameterError("rff_depth must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("dropout_p must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ParameterError("layer_norm_eps must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},
          {"num_blocks", num_blocks},
          {"heads", heads},
          {"dropout_p", dropout_p},
          {"rff_depth", rff_depth},
          {"pooling", to_string(pooling)},
          {"encoder", to_string(encoder)},
          {"layer_norm_eps", layer_norm_eps},
          {"pretrained_embeddings", pretrained_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
  ModelConfig c;
  c.vocab_size = doc.at("vocab_size").get<std::size_t>();
  c.embed_dim = doc.at("embed_dim").get<std::size_t>();
  c.hidden_dim = doc.at("hidden_dim").get<std::size_t>();
  c.num_blocks = doc.at("num_blocks").get<std::size_t>();
  c.heads = doc.at("heads").get<std::size_t>();
  c.dropout_p = doc.at("dropout_p").get<double>();
  c.rff_depth = doc.at("rff_depth").get<std::size_t>();
  c.pooling = parse_pooling(doc.at("pooling").get<std::string>());
  c.encoder = parse_encoder_variant(doc.at("encoder").get<std::string>());
  c.layer_norm_eps = doc.at("layer_norm_eps").get<double>();
  c.pretrained_embeddings = doc.at("pretrained_embeddings").get<bool>();
  c.validate();
  return c;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"default", "shared_sab", "deep_sets",
                                                 "pma",     "mean",       "max"};
  return names;
}

ModelConfig variant_config(const std::string& name, ModelConfig base) {
  base.encoder = EncoderVariant::cascaded_pmx;
  base.pooling = Pooling::sum;
  if (name == "default") return base;
  if (name == "shared_sab") {
    base.encoder = EncoderVariant::shared_sab;
  } else if (name == "deep_sets") {
    base.encoder = EncoderVariant::deep_sets;
  } else if (name == "pma" || name == "mean" || name == "max") {
    base.pooling = parse_pooling(name);
  } else {
    throw ParameterError("unknown model variant '" + name + "'");
  }
  return base;
}

// ---------------------------------------------------------------------------

AttentionBlock::AttentionBlock(const std::string& name, const ModelConfig& config, CounterRng& init)
    : attention(name + ".attention", config.hidden_dim, config.heads, init),
      attention_ff(name + ".attention_ff", config.hidden_dim, config.rff_depth, init),
      input_ff(name + ".input_ff", config.hidden_dim, config.rff_depth, init),
      inner_norm(name + ".inner_norm", config.hidden_dim, config.layer_norm_eps),
      outer_norm(name + ".outer_norm", config.hidden_dim, config.layer_norm_eps) {}

Var AttentionBlock::forward(Tape& tape, Var x, Var y, std::size_t groups,
                            nn::AttentionWeights* capture) const {
  if (x.cols() != y.cols()) throw nn::ShapeError("attention block: query and key widths differ");
  Var attended = attention.forward(tape, x, y, groups, capture);
  Var h = inner_norm.forward(tape, nn::add(x, attention_ff.forward(tape, attended)));
  return outer_norm.forward(tape, nn::add(h, input_ff.forward(tape, x)));
}

void AttentionBlock::collect(std::vector<Parameter*>& out) {
  attention.collect(out);
  attention_ff.collect(out);
  input_ff.collect(out);
  inner_norm.collect(out);
  outer_norm.collect(out);
}

// ---------------------------------------------------------------------------

RecipeMind::RecipeMind(ModelConfig config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  CounterRng init(init_seed, 0x1417);
  Tensor table(config_.vocab_size, config_.embed_dim);
  for (double& v : table.data()) v = 0.02 * init.normal();
  embedding_ = Parameter("embedding", std::move(table), !config_.pretrained_embeddings);
  shared_in_ = nn::Linear("shared_mlp.0", config_.embed_dim, config_.hidden_dim, init);
  shared_out_ = nn::Linear("shared_mlp.1", config_.hidden_dim, config_.hidden_dim, init);
  if (config_.encoder != EncoderVariant::deep_sets) {
    for (std::size_t l = 0; l < config_.num_blocks; ++l) {
      set_blocks_.emplace_back("set_encoder.sab" + std::to_string(l + 1), config_, init);
    }
  }
  if (config_.encoder == EncoderVariant::cascaded_pmx) {
    for (std::size_t l = 0; l < config_.num_blocks; ++l) {
      cross_blocks_.emplace_back("addition_encoder.pmx" + std::to_string(l + 1), config_, init);
    }
  }
  if (config_.pooling == Pooling::pma) {
    const double bound = std::sqrt(6.0 / static_cast<double>(1 + config_.hidden_dim));
    Tensor seed(1, config_.hidden_dim);
    for (double& v : seed.data()) v = init.uniform(-bound, bound);
    pma_seed_ = Parameter("pooling.pma.seed", std::move(seed));
    pma_block_ = AttentionBlock("pooling.pma", config_, init);
  }
  score_hidden_ = nn::Linear("score_mlp.0", 2 * config_.hidden_dim, config_.hidden_dim, init);
  score_out_ = nn::Linear("score_mlp.1", config_.hidden_dim, 1, init);
}

std::vector<Parameter*> RecipeMind::parameters() {
  std::vector<Parameter*> out{&embedding_};
  shared_in_.collect(out);
  shared_out_.collect(out);
  for (auto& b : set_blocks_) b.collect(out);
  for (auto& b : cross_blocks_) b.collect(out);
  if (config_.pooling == Pooling::pma) {
    out.push_back(&pma_seed_);
    pma_block_.collect(out);
  }
  score_hidden_.collect(out);
  score_out_.collect(out);
  return out;
}

std::vector<const Parameter*> RecipeMind::parameters() const {
  auto mutable_params = const_cast<RecipeMind*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::size_t RecipeMind::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

Parameter* RecipeMind::find_parameter(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

void RecipeMind::use_pretrained_embeddings(Tensor table) {
  if (table.rows() != config_.vocab_size || table.cols() != config_.embed_dim) {
    throw nn::ShapeError("pretrained table " + table.shape_string() + " does not match " +
                         std::to_string(config_.vocab_size) + "x" + std::to_string(config_.embed_dim));
  }
  config_.pretrained_embeddings = true;
  embedding_ = Parameter("embedding", std::move(table), false);
}

void RecipeMind::validate_inputs(std::span<const IngredientId> sets, std::size_t set_size,
                                 std::span<const IngredientId> additions) const {
  if (set_size == 0) throw DataError("ingredient set must not be empty");
  if (sets.size() != set_size * additions.size()) {
    throw DataError("batch holds " + std::to_string(sets.size()) + " ids, expected " +
                    std::to_string(set_size * additions.size()));
  }
  auto check_id = [&](IngredientId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw DataError("unknown ingredient id " + std::to_string(id));
    }
  };
  for (std::size_t b = 0; b < additions.size(); ++b) {
    const auto set = sets.subspan(b * set_size, set_size);
    for (std::size_t i = 0; i < set.size(); ++i) {
      check_id(set[i]);
      if (set[i] == additions[b]) {
        throw DataError("addition " + std::to_string(additions[b]) + " is already in the set");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (set[j] == set[i]) throw DataError("ingredient " + std::to_string(set[i]) + " repeats in the set");
      }
    }
    check_id(additions[b]);
  }
}

Var RecipeMind::pool(Tape& tape, Var states, std::size_t set_size, std::size_t groups) const {
  switch (config_.pooling) {
    case Pooling::sum: return nn::segment_sum(states, set_size);
    case Pooling::mean: return nn::segment_mean(states, set_size);
    case Pooling::max: return nn::segment_max(states, set_size);
    case Pooling::pma: {
      Var seeds = nn::repeat_row(tape.parameter(pma_seed_), groups);
      return pma_block_.forward(tape, seeds, states, groups);
    }
  }
  throw std::logic_error("unhandled pooling");
}

Var RecipeMind::forward_batch(Tape& tape, std::span<const IngredientId> sets, std::size_t set_size,
                              std::span<const IngredientId> additions, const ForwardOptions& options,
                              ForwardActivations* activations) const {
  validate_inputs(sets, set_size, additions);
  const std::size_t groups = additions.size();
  const std::size_t set_rows = groups * set_size;
  std::vector<IngredientId> ids(sets.begin(), sets.end());
  ids.insert(ids.end(), additions.begin(), additions.end());

  const double p = config_.dropout_p;
  Var rows = nn::gather_rows(tape.parameter(embedding_), ids);
  rows = nn::relu(nn::dropout(shared_in_.forward(tape, rows), p, options.training,
                              dropout_stream(options, kSiteSharedIn)));
  rows = nn::relu(nn::dropout(shared_out_.forward(tape, rows), p, options.training,
                              dropout_stream(options, kSiteSharedOut)));
  Var set_states = nn::slice_rows(rows, 0, set_rows);
  Var addition = nn::slice_rows(rows, set_rows, set_rows + groups);

  if (activations) {
    *activations = ForwardActivations{};
    activations->set_states.push_back(set_states.value());
    activations->addition_states.push_back(addition.value());
  }
  nn::AttentionWeights set_trace, cross_trace;
  auto* set_capture = activations ? &set_trace : nullptr;
  auto* cross_capture = activations ? &cross_trace : nullptr;

  switch (config_.encoder) {
    case EncoderVariant::cascaded_pmx:
      for (std::size_t l = 0; l < config_.num_blocks; ++l) {
        // a_l attends over S_{l-1}, so the cross block runs before S advances.
        Var next_addition = cross_blocks_[l].forward(tape, addition, set_states, groups, cross_capture);
        set_states = set_blocks_[l].forward(tape, set_states, set_states, groups, set_capture);
        addition = next_addition;
        if (activations) {
          activations->set_states.push_back(set_states.value());
          activations->addition_states.push_back(addition.value());
          activations->set_attention.push_back(std::move(set_trace));
          activations->cross_attention.push_back(std::move(cross_trace));
        }
      }
      break;
    case EncoderVariant::shared_sab:
      for (std::size_t l = 0; l < config_.num_blocks; ++l) {
        set_states = set_blocks_[l].forward(tape, set_states, set_states, groups, set_capture);
        addition = set_blocks_[l].forward(tape, addition, addition, groups);
        if (activations) {
          activations->set_states.push_back(set_states.value());
          activations->addition_states.push_back(addition.value());
          activations->set_attention.push_back(std::move(set_trace));
        }
      }
      break;
    case EncoderVariant::deep_sets:
      break;
  }

  Var set_context = pool(tape, set_states, set_size, groups);
  Var hidden = nn::relu(nn::dropout(score_hidden_.forward(tape, nn::concat_cols(set_context, addition)),
                                    p, options.training, dropout_stream(options, kSiteScore)));
  Var scores = score_out_.forward(tape, hidden);
  if (activations) {
    activations->set_context = set_context.value();
    activations->addition_context = addition.value();
    activations->scores.assign(scores.value().data().begin(), scores.value().data().end());
  }
  return scores;
}

std::pair<double, ForwardActivations> RecipeMind::forward(std::span<const IngredientId> set,
                                                          IngredientId addition, Mode mode,
                                                          std::uint64_t dropout_seed) const {
  Tape tape(nn::GradMode::disabled);
  ForwardActivations activations;
  ForwardOptions options{mode == Mode::train, dropout_seed, 0};
  const IngredientId additions[] = {addition};
  Var out = forward_batch(tape, set, set.size(), additions, options, &activations);
  return {out.value()[0], std::move(activations)};
}

std::vector<double> RecipeMind::score_additions(std::span<const IngredientId> set,
                                                std::span<const IngredientId> additions) const {
  if (additions.empty()) return {};
  std::vector<IngredientId> sets;
  sets.reserve(set.size() * additions.size());
  for (std::size_t b = 0; b < additions.size(); ++b) sets.insert(sets.end(), set.begin(), set.end());
  Tape tape(nn::GradMode::disabled);
  Var out = forward_batch(tape, sets, set.size(), additions, ForwardOptions{});
  return {out.value().data().begin(), out.value().data().end()};
}

// ---------------------------------------------------------------------------

Tensor load_embedding_file(const std::filesystem::path& path, const IngredientVocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file " + path.string());
  std::string line;
  std::size_t count = 0, dim = 0;
  if (!std::getline(in, line) || !(std::istringstream(line) >> count >> dim) || dim == 0) {
    throw DataError(path.string() + ": expected '<count> <dim>' header");
  }
  Tensor table(vocab.size(), dim);
  std::vector<bool> seen(vocab.size(), false);
  std::size_t line_no = 1, rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ++rows;
    std::vector<std::string> tokens;
    std::istringstream fields(line);
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (tokens.size() < dim + 1) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": expected a name and " +
                      std::to_string(dim) + " values");
    }
    std::string name;
    for (std::size_t i = 0; i + dim < tokens.size(); ++i) name += (i ? " " : "") + tokens[i];
    auto id = vocab.find(name);
    if (!id) continue;
    auto row = table.row(static_cast<std::size_t>(*id));
    try {
      for (std::size_t c = 0; c < dim; ++c) row[c] = std::stod(tokens[tokens.size() - dim + c]);
    } catch (const std::logic_error&) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": malformed value");
    }
    seen[static_cast<std::size_t>(*id)] = true;
  }
  if (rows != count) {
    throw DataError(path.string() + ": header promises " + std::to_string(count) + " rows, found " +
                    std::to_string(rows));
  }
  std::size_t missing = 0;
  std::string example;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) {
      if (missing++ == 0) example = vocab.name(static_cast<IngredientId>(i));
    }
  }
  if (missing) {
    throw DataError(path.string() + ": " + std::to_string(missing) +
                    " vocabulary ingredients have no embedding (e.g. '" + example + "')");
  }
  return table;
}

}  // namespace recipemind
