#include "recipemind/ideation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <ostream>
#include <thread>
#include <unordered_set>

namespace recipemind {

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void check_id(const CandidateScorer& scorer, IngredientId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= scorer.vocabulary_size()) {
    throw DataError("unknown ingredient id " + std::to_string(id));
  }
}

void check_set(const CandidateScorer& scorer, std::span<const IngredientId> set) {
  if (set.empty()) throw DataError("ingredient set must not be empty");
  std::unordered_set<IngredientId> seen;
  for (IngredientId id : set) {
    check_id(scorer, id);
    if (!seen.insert(id).second) throw DataError("ingredient " + std::to_string(id) + " repeats in the set");
  }
}

bool contains(std::span<const IngredientId> ids, IngredientId id) {
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

nlohmann::json names_of(std::span<const IngredientId> ids, const IngredientVocabulary& vocab) {
  nlohmann::json out = nlohmann::json::array();
  for (IngredientId id : ids) out.push_back(vocab.name(id));
  return out;
}

std::vector<IngredientId> ids_of(const nlohmann::json& names, const IngredientVocabulary& vocab) {
  if (!names.is_array()) throw DataError("session: expected an array of ingredient names");
  std::vector<IngredientId> out;
  for (const auto& n : names) {
    if (!n.is_string()) throw DataError("session: ingredient names must be strings");
    out.push_back(vocab.id_of(n.get<std::string>()));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> ModelScorer::score(std::span<const IngredientId> set,
                                       std::span<const IngredientId> candidates) const {
  std::vector<double> out(candidates.size());
  const std::size_t chunks = (candidates.size() + kChunk - 1) / kChunk;
  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(candidates.size(), begin + kChunk);
    const auto scores = model_.score_additions(set, candidates.subspan(begin, end - begin));
    std::copy(scores.begin(), scores.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
  };
  const unsigned workers = std::min<std::size_t>(threads_ == 0 ? std::thread::hardware_concurrency() : threads_, chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(chunks);
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks; c = next++) {
          try {
            run_chunk(c);
          } catch (...) {
            errors[c] = std::current_exception();
          }
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<double> ModelScorer::attention(std::span<const IngredientId> set, IngredientId addition) const {
  if (!model_.has_cross_attention()) {
    throw UnsupportedExplanation("model variant '" + to_string(model_.config().encoder) +
                                 "' has no cross-attention blocks to explain with");
  }
  return extract_attention(model_.forward(set, addition).second);
}

std::vector<double> FunctionScorer::score(std::span<const IngredientId> set,
                                          std::span<const IngredientId> candidates) const {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (IngredientId c : candidates) out.push_back(score_(set, c));
  return out;
}

std::vector<double> FunctionScorer::attention(std::span<const IngredientId> set, IngredientId addition) const {
  if (attention_) return attention_(set, addition);
  return std::vector<double>(set.size(), 1.0 / static_cast<double>(set.size()));
}

std::vector<double> extract_attention(const ForwardActivations& activations) {
  if (activations.cross_attention.empty()) {
    throw UnsupportedExplanation("forward pass recorded no cross-attention weights");
  }
  const auto& last = activations.cross_attention.back();
  std::vector<double> out(last.key_rows, 0.0);
  for (std::size_t h = 0; h < last.heads; ++h) {
    const auto row = last.row(0, h, 0);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += row[j];
  }
  for (double& w : out) w /= static_cast<double>(last.heads);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Recommendation> recommend(const CandidateScorer& scorer, std::span<const IngredientId> set,
                                      std::size_t k, std::span<const IngredientId> exclude) {
  check_set(scorer, set);
  for (IngredientId id : exclude) check_id(scorer, id);
  if (k == 0) return {};
  std::vector<IngredientId> candidates;
  for (std::size_t i = 0; i < scorer.vocabulary_size(); ++i) {
    const auto id = static_cast<IngredientId>(i);
    if (!contains(set, id) && !contains(exclude, id)) candidates.push_back(id);
  }
  const auto scores = scorer.score(set, candidates);
  std::vector<Recommendation> ranked;
  ranked.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!std::isfinite(scores[i])) {
      throw std::runtime_error("non-finite score for candidate " + std::to_string(candidates[i]));
    }
    ranked.push_back({candidates[i], scores[i]});
  }
  const std::size_t keep = std::min(k, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                    [](const Recommendation& a, const Recommendation& b) {
                      return a.score != b.score ? a.score > b.score : a.id < b.id;
                    });
  ranked.resize(keep);
  return ranked;
}

std::vector<IngredientId> IdeationSession::current_set() const {
  std::vector<IngredientId> out = initial_set;
  for (const auto& s : steps) out.push_back(s.chosen);
  return out;
}

IdeationSession start_session(const CandidateScorer& scorer, std::vector<IngredientId> start_set,
                              std::size_t top_k, std::string id, std::string fingerprint) {
  check_set(scorer, start_set);
  IdeationSession session;
  session.id = std::move(id);
  session.initial_set = std::move(start_set);
  session.checkpoint_fingerprint = std::move(fingerprint);
  session.created_at = utc_now();
  session.top_k = top_k;
  return session;
}

const IdeationStep& step(IdeationSession& session, const CandidateScorer& scorer,
                         std::optional<IngredientId> choice, std::span<const IngredientId> exclude) {
  const auto current = session.current_set();
  IdeationStep next;
  next.index = session.steps.size() + 1;
  next.set_before = current;
  next.exclude.assign(exclude.begin(), exclude.end());
  next.recommendations = recommend(scorer, current, session.top_k, exclude);

  if (choice) {
    check_id(scorer, *choice);
    if (contains(current, *choice)) {
      throw DataError("ingredient " + std::to_string(*choice) + " is already in the set");
    }
    if (contains(exclude, *choice)) {
      throw DataError("ingredient " + std::to_string(*choice) + " is excluded");
    }
    next.chosen = *choice;
    auto it = std::find_if(next.recommendations.begin(), next.recommendations.end(),
                           [&](const Recommendation& r) { return r.id == *choice; });
    const IngredientId one[] = {*choice};
    next.chosen_score = it != next.recommendations.end() ? it->score : scorer.score(current, one)[0];
  } else {
    auto best = next.recommendations.empty() ? recommend(scorer, current, 1, exclude) : next.recommendations;
    if (best.empty()) throw DataError("no candidate ingredients are left to add");
    next.chosen = best.front().id;
    next.chosen_score = best.front().score;
    next.automatic = true;
  }
  try {
    next.attention = scorer.attention(current, next.chosen);
  } catch (const UnsupportedExplanation&) {
    next.attention.reset();
  }
  session.steps.push_back(std::move(next));
  return session.steps.back();
}

IdeationSession auto_ideate(const CandidateScorer& scorer, std::vector<IngredientId> start_set,
                            std::size_t n_steps, std::size_t top_k) {
  IdeationSession session = start_session(scorer, std::move(start_set), top_k);
  for (std::size_t i = 0; i < n_steps; ++i) step(session, scorer);
  return session;
}

IdeationSession replay(const IdeationSession& session, const CandidateScorer& scorer) {
  IdeationSession out =
      start_session(scorer, session.initial_set, session.top_k, session.id, session.checkpoint_fingerprint);
  out.created_at = session.created_at;
  for (const auto& s : session.steps) {
    step(out, scorer, s.automatic ? std::nullopt : std::optional<IngredientId>(s.chosen), s.exclude);
  }
  return out;
}

double max_trace_difference(const IdeationSession& a, const IdeationSession& b) {
  if (a.initial_set != b.initial_set || a.steps.size() != b.steps.size()) {
    throw DataError("session traces differ in start set or length");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    const auto& x = a.steps[i];
    const auto& y = b.steps[i];
    if (x.chosen != y.chosen || x.recommendations.size() != y.recommendations.size() ||
        x.attention.has_value() != y.attention.has_value()) {
      throw DataError("session traces diverge at step " + std::to_string(i + 1));
    }
    worst = std::max(worst, std::abs(x.chosen_score - y.chosen_score));
    for (std::size_t r = 0; r < x.recommendations.size(); ++r) {
      if (x.recommendations[r].id != y.recommendations[r].id) {
        throw DataError("session rankings diverge at step " + std::to_string(i + 1));
      }
      worst = std::max(worst, std::abs(x.recommendations[r].score - y.recommendations[r].score));
    }
    if (x.attention) {
      if (x.attention->size() != y.attention->size()) throw DataError("attention rows differ in length");
      for (std::size_t j = 0; j < x.attention->size(); ++j) {
        worst = std::max(worst, std::abs((*x.attention)[j] - (*y.attention)[j]));
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------

nlohmann::json IdeationSession::to_json(const IngredientVocabulary& vocab) const {
  nlohmann::json doc = {{"format", "recipemind-session"},
                        {"version", 1},
                        {"session_id", id},
                        {"created_at", created_at},
                        {"checkpoint_fingerprint", checkpoint_fingerprint},
                        {"top_k", top_k},
                        {"initial_set", names_of(initial_set, vocab)},
                        {"current_set", names_of(current_set(), vocab)},
                        {"steps", nlohmann::json::array()}};
  for (const auto& s : steps) {
    nlohmann::json recs = nlohmann::json::array();
    for (std::size_t r = 0; r < s.recommendations.size(); ++r) {
      recs.push_back({{"rank", r + 1}, {"name", vocab.name(s.recommendations[r].id)}, {"score", s.recommendations[r].score}});
    }
    nlohmann::json attention = nullptr;
    if (s.attention) {
      attention = nlohmann::json::array();
      for (std::size_t j = 0; j < s.set_before.size(); ++j) {
        attention.push_back({{"name", vocab.name(s.set_before[j])}, {"weight", (*s.attention)[j]}});
      }
    }
    doc["steps"].push_back({{"step", s.index},
                            {"set_before", names_of(s.set_before, vocab)},
                            {"exclude", names_of(s.exclude, vocab)},
                            {"recommendations", recs},
                            {"chosen", {{"name", vocab.name(s.chosen)}, {"score", s.chosen_score}}},
                            {"mode", s.automatic ? "auto" : "manual"},
                            {"attention", attention}});
  }
  return doc;
}

IdeationSession IdeationSession::from_json(const nlohmann::json& doc, const IngredientVocabulary& vocab) {
  try {
    if (doc.at("format") != "recipemind-session") throw DataError("not a session document");
    if (doc.at("version") != 1) throw DataError("unsupported session version " + doc.at("version").dump());
    IdeationSession s;
    s.id = doc.at("session_id").get<std::string>();
    s.created_at = doc.at("created_at").get<std::string>();
    s.checkpoint_fingerprint = doc.at("checkpoint_fingerprint").get<std::string>();
    s.top_k = doc.at("top_k").get<std::size_t>();
    s.initial_set = ids_of(doc.at("initial_set"), vocab);
    if (s.initial_set.empty()) throw DataError("session has an empty initial set");
    for (const auto& js : doc.at("steps")) {
      IdeationStep st;
      st.index = js.at("step").get<std::size_t>();
      st.set_before = ids_of(js.at("set_before"), vocab);
      st.exclude = ids_of(js.at("exclude"), vocab);
      if (st.index != s.steps.size() + 1 || st.set_before != s.current_set()) {
        throw DataError("session step " + std::to_string(st.index) + " does not continue the previous step");
      }
      for (const auto& r : js.at("recommendations")) {
        st.recommendations.push_back({vocab.id_of(r.at("name").get<std::string>()), r.at("score").get<double>()});
      }
      st.chosen = vocab.id_of(js.at("chosen").at("name").get<std::string>());
      st.chosen_score = js.at("chosen").at("score").get<double>();
      if (contains(st.set_before, st.chosen)) throw DataError("session step chooses an ingredient already in the set");
      const auto mode = js.at("mode").get<std::string>();
      if (mode != "auto" && mode != "manual") throw DataError("unknown step mode '" + mode + "'");
      st.automatic = mode == "auto";
      const auto& att = js.at("attention");
      if (!att.is_null()) {
        std::vector<double> weights;
        for (const auto& w : att) weights.push_back(w.at("weight").get<double>());
        if (weights.size() != st.set_before.size()) throw DataError("attention row length does not match the set");
        st.attention = std::move(weights);
      }
      s.steps.push_back(std::move(st));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed session document: ") + e.what());
  }
}

void print_session_table(std::ostream& out, const IdeationSession& session, const IngredientVocabulary& vocab) {
  auto label = [&](const Recommendation& r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " (%.4f)", r.score);
    return vocab.name(r.id) + buf;
  };
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"step", "set size", "top-1", "top-2", "top-3", "chosen"});
  for (const auto& s : session.steps) {
    std::vector<std::string> row = {std::to_string(s.index), std::to_string(s.set_before.size())};
    for (std::size_t r = 0; r < 3; ++r) row.push_back(r < s.recommendations.size() ? label(s.recommendations[r]) : "-");
    row.push_back(vocab.name(s.chosen) + (s.automatic ? "" : " *"));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> widths(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }

  std::vector<std::string> start;
  for (IngredientId id : session.initial_set) start.push_back(vocab.name(id));
  out << "start: ";
  for (std::size_t i = 0; i < start.size(); ++i) out << (i ? ", " : "") << start[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out << std::left << std::setw(static_cast<int>(widths[c])) << row[c] << (c + 1 < row.size() ? "  " : "");
    }
    out << '\n';
  }

  out << "final set (" << session.current_set().size() << "): ";
  const auto final_set = session.current_set();
  for (std::size_t i = 0; i < final_set.size(); ++i) out << (i ? ", " : "") << vocab.name(final_set[i]);
  out << '\n';

  bool any = false;
  for (const auto& s : session.steps) any = any || s.attention.has_value();
  if (!any) return;
  out << "\nattention of the chosen ingredient over the set (last cross-attention block, heads averaged)\n";
  for (const auto& s : session.steps) {
    out << "step " << s.index << ":";
    if (!s.attention) {
      out << " -\n";
      continue;
    }
    for (std::size_t j = 0; j < s.set_before.size(); ++j) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.3f", (*s.attention)[j]);
      out << "  " << vocab.name(s.set_before[j]) << buf;
    }
    out << '\n';
  }
}

}  // namespace recipemind
