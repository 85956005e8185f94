#include "recipemind/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>

namespace recipemind {
namespace {

constexpr std::array<char, 8> kMagic = {'R', 'M', 'C', 'K', 'P', 'T', '\0', '\1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_tensor(std::string& out, const nn::Tensor& t) {
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& where) : bytes_(bytes), where_(where) {}

  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  nn::Tensor tensor(std::size_t rows, std::size_t cols) {
    nn::Tensor t(rows, cols);
    need(8 * t.size());
    for (double& v : t.data()) v = std::bit_cast<double>(u(8));
    return t;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(where_ + ": truncated checkpoint");
  }

  const std::string& bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto params = checkpoint.model.parameters();
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto* p : params) {
    manifest.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  nlohmann::json vocab = nlohmann::json::array();
  for (const auto& e : checkpoint.vocabulary.entries()) vocab.push_back({e.name, e.count});

  nlohmann::json header = {
      {"format_version", Checkpoint::kFormatVersion},
      {"config", checkpoint.model.config().to_json()},
      {"training_seed", checkpoint.training_seed},
      {"vocabulary_fingerprint", checkpoint.vocabulary.fingerprint()},
      {"vocabulary", vocab},
      {"parameters", manifest},
      {"metadata", checkpoint.metadata},
  };
  if (checkpoint.optimizer) {
    const auto& o = *checkpoint.optimizer;
    if (o.first_moments.size() != params.size() || o.second_moments.size() != params.size()) {
      throw std::logic_error("optimizer snapshot does not match the parameter list");
    }
    header["optimizer"] = {{"kind", "adam"},
                           {"learning_rate", o.config.learning_rate},
                           {"weight_decay", o.config.weight_decay},
                           {"beta1", o.config.beta1},
                           {"beta2", o.config.beta2},
                           {"epsilon", o.config.epsilon},
                           {"steps", o.steps}};
  }

  std::string bytes(kMagic.begin(), kMagic.end());
  const std::string header_text = header.dump();
  put_u32(bytes, Checkpoint::kFormatVersion);
  put_u64(bytes, header_text.size());
  bytes += header_text;
  for (const auto* p : params) put_tensor(bytes, p->value);
  if (checkpoint.optimizer) {
    for (const auto& m : checkpoint.optimizer->first_moments) put_tensor(bytes, m);
    for (const auto& v : checkpoint.optimizer->second_moments) put_tensor(bytes, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_vocabulary_fingerprint,
                           FingerprintPolicy policy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  Reader reader(bytes, where);

  if (reader.take(kMagic.size()) != std::string(kMagic.begin(), kMagic.end())) {
    throw CheckpointError(where + ": not a checkpoint file");
  }
  const auto version = static_cast<std::uint32_t>(reader.u(4));
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError(where + ": unsupported format version " + std::to_string(version));
  }
  const std::uint64_t header_len = reader.u(8);
  if (header_len > bytes.size()) throw CheckpointError(where + ": truncated checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(reader.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + ": corrupt header: " + e.what());
  }

  Checkpoint ck;
  try {
    if (header.at("format_version").get<std::uint32_t>() != version) {
      throw CheckpointError(where + ": header version disagrees with file version");
    }
    std::vector<VocabularyEntry> entries;
    for (const auto& item : header.at("vocabulary")) {
      entries.push_back({item.at(0).get<std::string>(), static_cast<IngredientId>(entries.size()),
                         item.at(1).get<Count>()});
    }
    ck.vocabulary = IngredientVocabulary(std::move(entries));
    const auto stored_fp = header.at("vocabulary_fingerprint").get<std::string>();
    if (stored_fp != ck.vocabulary.fingerprint()) {
      throw CheckpointError(where + ": vocabulary does not match its stored fingerprint");
    }
    if (expected_vocabulary_fingerprint && *expected_vocabulary_fingerprint != stored_fp) {
      const std::string message = where + ": checkpoint vocabulary fingerprint " + stored_fp +
                                  " differs from expected " + *expected_vocabulary_fingerprint;
      if (policy == FingerprintPolicy::reject) throw FingerprintMismatch(message);
      if (policy == FingerprintPolicy::warn) std::cerr << "warning: " << message << '\n';
    }

    ck.training_seed = header.at("training_seed").get<std::uint64_t>();
    ck.metadata = header.value("metadata", nlohmann::json::object());
    ck.model = RecipeMind(ModelConfig::from_json(header.at("config")), 0);
    auto params = ck.model.parameters();
    const auto& manifest = header.at("parameters");
    if (manifest.size() != params.size()) {
      throw CheckpointError(where + ": parameter count does not match the configured architecture");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& m = manifest[i];
      const auto rows = m.at("rows").get<std::size_t>();
      const auto cols = m.at("cols").get<std::size_t>();
      if (m.at("name").get<std::string>() != params[i]->name || rows != params[i]->value.rows() ||
          cols != params[i]->value.cols()) {
        throw CheckpointError(where + ": parameter " + std::to_string(i) + " does not match '" +
                              params[i]->name + "'");
      }
      params[i]->value = reader.tensor(rows, cols);
      params[i]->zero_grad();
    }
    if (header.contains("optimizer")) {
      const auto& o = header["optimizer"];
      OptimizerSnapshot snap;
      snap.config = {o.at("learning_rate").get<double>(), o.at("weight_decay").get<double>(),
                     o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                     o.at("epsilon").get<double>()};
      snap.steps = o.at("steps").get<std::uint64_t>();
      for (auto* p : params) snap.first_moments.push_back(reader.tensor(p->value.rows(), p->value.cols()));
      for (auto* p : params) snap.second_moments.push_back(reader.tensor(p->value.rows(), p->value.cols()));
      ck.optimizer = std::move(snap);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + ": corrupt header: " + e.what());
  } catch (const ParameterError& e) {
    throw CheckpointError(where + ": invalid configuration: " + e.what());
  }
  if (!reader.done()) throw CheckpointError(where + ": trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace recipemind
