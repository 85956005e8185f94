#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "recipemind/ideation.hpp"

using namespace recipemind;

namespace {

FunctionScorer negative_id(std::size_t vocab = 4) {
  return FunctionScorer(vocab, [](std::span<const IngredientId>, IngredientId i) { return -static_cast<double>(i); });
}

IngredientVocabulary named_vocab(std::size_t n) {
  std::vector<VocabularyEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    entries.push_back({"item " + std::to_string(i), static_cast<IngredientId>(i), static_cast<Count>(1000 - i)});
  }
  return IngredientVocabulary(std::move(entries));
}

ModelConfig toy(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 6;
  c.hidden_dim = 8;
  c.heads = 2;
  c.num_blocks = 2;
  c.rff_depth = 2;
  return c;
}

}  // namespace

TEST_CASE("recommend with a stub scorer") {
  auto scorer = negative_id();
  const IngredientId set[] = {0};
  CHECK(recommend(scorer, set, 0).empty());
  auto top2 = recommend(scorer, set, 2);
  REQUIRE(top2.size() == 2);
  CHECK(top2[0] == Recommendation{1, -1.0});
  CHECK(top2[1] == Recommendation{2, -2.0});
  CHECK(recommend(scorer, set, 10).size() == 3);

  const IngredientId exclude[] = {1};
  auto without = recommend(scorer, set, 2, exclude);
  CHECK(without[0].id == 2);
  CHECK(without[1].id == 3);

  const IngredientId unknown[] = {9};
  CHECK_THROWS_AS(recommend(scorer, unknown, 2), DataError);
  CHECK_THROWS_AS(recommend(scorer, std::span<const IngredientId>{}, 2), DataError);
}

TEST_CASE("ties break by ascending id") {
  FunctionScorer flat(6, [](std::span<const IngredientId>, IngredientId i) { return i % 2 ? 1.0 : 0.0; });
  const IngredientId set[] = {1};
  auto r = recommend(flat, set, 5);
  std::vector<IngredientId> order;
  for (const auto& x : r) order.push_back(x.id);
  CHECK(order == std::vector<IngredientId>{3, 5, 0, 2, 4});
}

TEST_CASE("ranking is invariant under increasing transforms") {
  auto base = [](std::span<const IngredientId> s, IngredientId i) { return std::sin(3.0 * i + static_cast<double>(s.size())); };
  FunctionScorer a(40, base);
  FunctionScorer b(40, [&](std::span<const IngredientId> s, IngredientId i) { return std::exp(2.0 * base(s, i)) - 7.0; });
  const IngredientId set[] = {4, 9};
  auto ra = recommend(a, set, 38);
  auto rb = recommend(b, set, 38);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].id == rb[i].id);
}

TEST_CASE("greedy steps follow the stub argmax") {
  auto scorer = negative_id();
  auto session = auto_ideate(scorer, {0}, 3, 2);
  REQUIRE(session.steps.size() == 3);
  CHECK(session.steps[0].chosen == 1);
  CHECK(session.steps[1].chosen == 2);
  CHECK(session.steps[2].chosen == 3);
  CHECK(session.current_set() == std::vector<IngredientId>{0, 1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(session.steps[i].automatic);
    CHECK(session.steps[i].attention->size() == session.steps[i].set_before.size());
  }
  CHECK(session.steps[1].set_before == std::vector<IngredientId>{0, 1});
  CHECK(session.steps[2].recommendations == std::vector<Recommendation>{{3, -3.0}});
  CHECK_THROWS_AS(step(session, scorer), DataError);
  CHECK(auto_ideate(scorer, {0}, 0).steps.empty());
}

TEST_CASE("manual steps validate the choice") {
  auto scorer = negative_id(6);
  auto session = start_session(scorer, {0, 2});
  CHECK_THROWS_AS(step(session, scorer, 2), DataError);
  CHECK_THROWS_AS(step(session, scorer, 17), DataError);
  const IngredientId exclude[] = {5};
  CHECK_THROWS_AS(step(session, scorer, 5, exclude), DataError);
  CHECK(session.steps.empty());
  // A legal choice outside the shown top-k still works.
  const auto& s = step(session, scorer, 5);
  CHECK(s.chosen == 5);
  CHECK(s.chosen_score == -5.0);
  CHECK_FALSE(s.automatic);
  CHECK_THROWS_AS(start_session(scorer, {1, 1}), DataError);
  CHECK_THROWS_AS(start_session(scorer, {}), DataError);
}

TEST_CASE("start of two plus eight steps gives ten ingredients") {
  RecipeMind model(toy(30), 3);
  ModelScorer scorer(model);
  auto session = auto_ideate(scorer, {4, 11}, 8, 3);
  const auto final_set = session.current_set();
  CHECK(final_set.size() == 10);
  auto sorted = final_set;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  for (const auto& s : session.steps) {
    REQUIRE(s.attention.has_value());
    CHECK(s.attention->size() == s.set_before.size());
    const double total = std::accumulate(s.attention->begin(), s.attention->end(), 0.0);
    CHECK(std::abs(total - 1.0) <= 1e-12);
    for (double w : *s.attention) CHECK(w >= 0.0);
  }
  auto again = auto_ideate(scorer, {4, 11}, 8, 3);
  CHECK(max_trace_difference(session, again) == 0.0);
}

TEST_CASE("model attention explanations") {
  RecipeMind model(toy(12), 5);
  ModelScorer scorer(model);
  const IngredientId one[] = {3};
  auto single = scorer.attention(one, 7);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == 1.0);

  const IngredientId set[] = {1, 4, 9, 10};
  const IngredientId perm[] = {10, 1, 9, 4};
  auto a = scorer.attention(set, 2);
  auto b = scorer.attention(perm, 2);
  CHECK(std::abs(b[0] - a[3]) <= 1e-12);
  CHECK(std::abs(b[1] - a[0]) <= 1e-12);
  CHECK(std::abs(b[2] - a[2]) <= 1e-12);
  CHECK(std::abs(b[3] - a[1]) <= 1e-12);

  RecipeMind plain(variant_config("deep_sets", toy(12)), 5);
  ModelScorer plain_scorer(plain);
  CHECK_THROWS_AS(plain_scorer.attention(set, 2), UnsupportedExplanation);
  CHECK_THROWS_AS(extract_attention(plain.forward(set, 2).second), UnsupportedExplanation);
  auto session = auto_ideate(plain_scorer, {1, 4}, 2, 3);
  CHECK_FALSE(session.steps[0].attention.has_value());
  CHECK(session.steps.size() == 2);
}

TEST_CASE("scores do not depend on the thread count") {
  RecipeMind model(toy(700), 7);
  ModelScorer one(model, 1);
  ModelScorer three(model, 3);
  const IngredientId set[] = {5, 99, 300};
  auto a = recommend(one, set, 700);
  auto b = recommend(three, set, 700);
  REQUIRE(a.size() == 697);
  CHECK(a == b);
  auto sa = auto_ideate(one, {5, 99}, 4, 3);
  auto sb = auto_ideate(three, {5, 99}, 4, 3);
  CHECK(max_trace_difference(sa, sb) == 0.0);
}

TEST_CASE("session export, import and replay") {
  RecipeMind model(toy(20), 9);
  ModelScorer scorer(model);
  auto vocab = named_vocab(20);
  auto session = start_session(scorer, {2, 7}, 3, "abc", "f00d");
  step(session, scorer);
  const IngredientId exclude[] = {0};
  step(session, scorer, 13, exclude);
  step(session, scorer);

  auto doc = session.to_json(vocab);
  CHECK(doc["format"] == "recipemind-session");
  CHECK(doc["steps"].size() == 3);
  CHECK(doc["steps"][1]["mode"] == "manual");
  CHECK(doc["steps"][1]["chosen"]["name"] == "item 13");
  CHECK(doc["steps"][0]["recommendations"].size() == 3);
  CHECK(doc["steps"][0]["attention"].size() == 2);
  CHECK(doc["current_set"].size() == 5);

  auto back = IdeationSession::from_json(nlohmann::json::parse(doc.dump()), vocab);
  CHECK(back.to_json(vocab) == doc);
  CHECK(max_trace_difference(back, session) <= 1e-15);

  auto replayed = replay(back, scorer);
  CHECK(max_trace_difference(replayed, session) <= 1e-9);
  CHECK(replayed.steps[1].exclude == std::vector<IngredientId>{0});

  auto broken = doc;
  broken["steps"][1]["set_before"] = nlohmann::json::array({"item 2"});
  CHECK_THROWS_AS(IdeationSession::from_json(broken, vocab), DataError);
  broken = doc;
  broken["steps"][0]["chosen"]["name"] = "item 2";
  CHECK_THROWS_AS(IdeationSession::from_json(broken, vocab), DataError);
  broken = doc;
  broken.erase("top_k");
  CHECK_THROWS_AS(IdeationSession::from_json(broken, vocab), DataError);
}

TEST_CASE("session table has three recommendation columns") {
  auto scorer = negative_id(8);
  auto vocab = named_vocab(8);
  auto session = auto_ideate(scorer, {0, 5}, 2, 3);
  std::ostringstream out;
  print_session_table(out, session, vocab);
  const auto text = out.str();
  CHECK(text.find("top-1") != std::string::npos);
  CHECK(text.find("top-3") != std::string::npos);
  CHECK(text.find("item 1 (-1.0000)") != std::string::npos);
  CHECK(text.find("final set (4)") != std::string::npos);
  CHECK(text.find("step 2:") != std::string::npos);
}
