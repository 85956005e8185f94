#include "recipemind/service.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <unordered_map>

#include <httplib.h>

#include "recipemind/fingerprint.hpp"
#include "recipemind/ideation.hpp"

namespace recipemind {

namespace {

ApiError bad_request(const std::string& message) { return ApiError(400, "bad_request", message); }

std::string random_session_id() {
  static std::mutex mutex;
  static std::random_device device;
  std::lock_guard lock(mutex);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%08x%08x%08x%08x", device(), device(), device(), device());
  return buf;
}

const nlohmann::json& require(const nlohmann::json& body, const char* key) {
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  auto it = body.find(key);
  if (it == body.end()) throw bad_request(std::string("missing field '") + key + "'");
  return *it;
}

std::string as_name(const nlohmann::json& value, const char* field) {
  if (!value.is_string()) throw bad_request(std::string("'") + field + "' must hold ingredient names");
  return value.get<std::string>();
}

}  // namespace

nlohmann::json ApiError::body() const {
  return {{"error", {{"status", status_}, {"code", code_}, {"message", what()}}}};
}

struct RecipeMindService::Impl {
  struct Loaded {
    Checkpoint checkpoint;
    std::string fingerprint;
    std::unique_ptr<ModelScorer> scorer;
  };
  struct SessionSlot {
    std::mutex mutex;
    IdeationSession session;
  };

  ServiceOptions options;
  mutable std::mutex loaded_mutex;
  std::shared_ptr<const Loaded> loaded;
  mutable std::shared_mutex sessions_mutex;
  std::unordered_map<std::string, std::shared_ptr<SessionSlot>> sessions;
  httplib::Server server;

  std::shared_ptr<const Loaded> model() const {
    std::lock_guard lock(loaded_mutex);
    if (!loaded) throw ApiError(503, "model_unavailable", "no checkpoint is loaded");
    return loaded;
  }

  static IngredientId id_of(const Loaded& m, const std::string& name) {
    auto id = m.checkpoint.vocabulary.find(name);
    if (!id) throw ApiError(404, "unknown_ingredient", "unknown ingredient '" + name + "'");
    return *id;
  }

  static std::vector<IngredientId> ids_of(const Loaded& m, const nlohmann::json& names, const char* field) {
    if (!names.is_array()) throw bad_request(std::string("'") + field + "' must be an array of ingredient names");
    std::vector<IngredientId> out;
    for (const auto& n : names) out.push_back(id_of(m, as_name(n, field)));
    return out;
  }

  static std::vector<IngredientId> set_of(const Loaded& m, const nlohmann::json& names, const char* field) {
    auto ids = ids_of(m, names, field);
    if (ids.empty()) throw ApiError(422, "illegal_set", std::string("'") + field + "' must not be empty");
    auto sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    auto dup = std::adjacent_find(sorted.begin(), sorted.end());
    if (dup != sorted.end()) {
      throw ApiError(422, "illegal_set",
                     "ingredient '" + m.checkpoint.vocabulary.name(*dup) + "' appears twice in '" + field + "'");
    }
    return ids;
  }

  std::shared_ptr<SessionSlot> session(const std::string& id) const {
    std::shared_lock lock(sessions_mutex);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw ApiError(404, "session_not_found", "no session '" + id + "'");
    return it->second;
  }

  void restore_sessions(const Loaded& m) {
    if (!options.session_snapshot || !std::filesystem::exists(*options.session_snapshot)) return;
    std::ifstream in(*options.session_snapshot);
    const auto doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.contains("sessions")) {
      std::cerr << "warning: ignoring unreadable session snapshot " << *options.session_snapshot << '\n';
      return;
    }
    std::unique_lock lock(sessions_mutex);
    for (const auto& s : doc["sessions"]) {
      try {
        auto slot = std::make_shared<SessionSlot>();
        slot->session = IdeationSession::from_json(s, m.checkpoint.vocabulary);
        if (slot->session.checkpoint_fingerprint != m.fingerprint) continue;
        sessions[slot->session.id] = std::move(slot);
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping session in snapshot: " << e.what() << '\n';
      }
    }
  }
};

RecipeMindService::RecipeMindService(ServiceOptions options) : impl_(std::make_unique<Impl>()) {
  impl_->options = std::move(options);
  auto& server = impl_->server;
  const unsigned threads = std::max(1u, impl_->options.threads);
  server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };

  using Handler = std::function<std::pair<int, nlohmann::json>(const httplib::Request&)>;
  auto wrap = [](Handler handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      int status = 200;
      nlohmann::json body;
      try {
        std::tie(status, body) = handler(req);
      } catch (const ApiError& e) {
        status = e.status();
        body = e.body();
      } catch (const nlohmann::json::exception& e) {
        const ApiError err = bad_request(std::string("malformed JSON: ") + e.what());
        status = err.status();
        body = err.body();
      } catch (const std::exception& e) {
        const ApiError err(500, "internal_error", e.what());
        status = err.status();
        body = err.body();
      }
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
  };
  auto parse = [](const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    return nlohmann::json::parse(req.body);
  };

  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/healthz", wrap([this](const httplib::Request&) { return std::pair{200, healthz()}; }));
  server.Get("/ingredients", wrap([this](const httplib::Request& req) {
               long limit = 10;
               if (req.has_param("limit")) {
                 const auto text = req.get_param_value("limit");
                 try {
                   std::size_t used = 0;
                   limit = std::stol(text, &used);
                   if (used != text.size()) throw std::invalid_argument(text);
                 } catch (const std::logic_error&) {
                   throw bad_request("limit must be an integer, got '" + text + "'");
                 }
               }
               return std::pair{200, ingredients(req.get_param_value("q"), limit)};
             }));
  server.Post("/score", wrap([this, parse](const httplib::Request& req) { return std::pair{200, score(parse(req))}; }));
  server.Post("/recommend",
              wrap([this, parse](const httplib::Request& req) { return std::pair{200, recommend(parse(req))}; }));
  server.Post("/sessions",
              wrap([this, parse](const httplib::Request& req) { return std::pair{201, create_session(parse(req))}; }));
  server.Post(R"(/sessions/([0-9a-f]+)/step)", wrap([this, parse](const httplib::Request& req) {
                return std::pair{200, step_session(req.matches[1], parse(req))};
              }));
  server.Get(R"(/sessions/([0-9a-f]+))",
             wrap([this](const httplib::Request& req) { return std::pair{200, get_session(req.matches[1])}; }));
  server.Delete(R"(/sessions/([0-9a-f]+))",
                wrap([this](const httplib::Request& req) { return std::pair{200, delete_session(req.matches[1])}; }));

  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const bool session_path = res.status == 404 && req.path.rfind("/sessions/", 0) == 0;
    const ApiError routed(res.status, session_path ? "session_not_found" : "bad_request",
                          "no route for " + req.method + " " + req.path);
    res.set_content(routed.body().dump(), "application/json");
  });
}

RecipeMindService::~RecipeMindService() { stop(); }

void RecipeMindService::load(Checkpoint checkpoint, std::string fingerprint) {
  auto loaded = std::make_shared<Impl::Loaded>();
  loaded->checkpoint = std::move(checkpoint);
  loaded->fingerprint = std::move(fingerprint);
  loaded->scorer = std::make_unique<ModelScorer>(loaded->checkpoint.model, impl_->options.scoring_threads);
  {
    std::unique_lock lock(impl_->sessions_mutex);
    impl_->sessions.clear();
  }
  impl_->restore_sessions(*loaded);
  std::lock_guard lock(impl_->loaded_mutex);
  impl_->loaded = std::move(loaded);
}

void RecipeMindService::load_file(const std::filesystem::path& path) {
  auto checkpoint = load_checkpoint(path);
  load(std::move(checkpoint), file_sha256_hex(path));
}

bool RecipeMindService::loaded() const {
  std::lock_guard lock(impl_->loaded_mutex);
  return impl_->loaded != nullptr;
}

nlohmann::json RecipeMindService::healthz() const {
  const auto m = impl_->model();
  return {{"status", "ok"},
          {"checkpoint_fingerprint", m->fingerprint},
          {"vocabulary_fingerprint", m->checkpoint.vocabulary.fingerprint()},
          {"vocabulary_size", m->checkpoint.vocabulary.size()},
          {"encoder", to_string(m->checkpoint.model.config().encoder)},
          {"pooling", to_string(m->checkpoint.model.config().pooling)}};
}

nlohmann::json RecipeMindService::ingredients(const std::string& query, long limit) const {
  if (limit < 0) throw bad_request("limit must be non-negative");
  const auto m = impl_->model();
  const std::string prefix = normalize_ingredient_name(query);
  nlohmann::json list = nlohmann::json::array();
  // Vocabulary ids already run by descending count, then name.
  for (const auto& e : m->checkpoint.vocabulary.entries()) {
    if (list.size() >= static_cast<std::size_t>(limit)) break;
    if (e.name.compare(0, prefix.size(), prefix) == 0) list.push_back({{"name", e.name}, {"count", e.count}});
  }
  return {{"query", query}, {"ingredients", list}};
}

nlohmann::json RecipeMindService::score(const nlohmann::json& body) const {
  const auto m = impl_->model();
  const auto set = Impl::set_of(*m, require(body, "set"), "set");
  const auto addition_name = as_name(require(body, "addition"), "addition");
  const IngredientId addition = Impl::id_of(*m, addition_name);
  if (std::find(set.begin(), set.end(), addition) != set.end()) {
    throw ApiError(422, "illegal_set", "addition '" + addition_name + "' is already in the set");
  }
  const double value = m->checkpoint.model.forward(set, addition).first;
  nlohmann::json names = nlohmann::json::array();
  for (IngredientId id : set) names.push_back(m->checkpoint.vocabulary.name(id));
  return {{"set", names}, {"addition", m->checkpoint.vocabulary.name(addition)}, {"score", value}};
}

nlohmann::json RecipeMindService::recommend(const nlohmann::json& body) const {
  const auto m = impl_->model();
  const auto set = Impl::set_of(*m, require(body, "set"), "set");
  long k = 10;
  if (body.contains("k")) {
    if (!body["k"].is_number_integer()) throw bad_request("'k' must be an integer");
    k = body["k"].get<long>();
    if (k < 0) throw bad_request("'k' must be non-negative");
  }
  std::vector<IngredientId> exclude;
  if (body.contains("exclude")) exclude = Impl::ids_of(*m, body["exclude"], "exclude");
  const auto ranked = recipemind::recommend(*m->scorer, set, static_cast<std::size_t>(k), exclude);
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    list.push_back({{"rank", r + 1}, {"name", m->checkpoint.vocabulary.name(ranked[r].id)}, {"score", ranked[r].score}});
  }
  return {{"recommendations", list}};
}

nlohmann::json RecipeMindService::create_session(const nlohmann::json& body) {
  const auto m = impl_->model();
  const auto start = Impl::set_of(*m, require(body, "start_set"), "start_set");
  std::size_t top_k = 3;
  if (body.contains("top_k")) {
    if (!body["top_k"].is_number_unsigned()) throw bad_request("'top_k' must be a non-negative integer");
    top_k = body["top_k"].get<std::size_t>();
  }
  auto slot = std::make_shared<Impl::SessionSlot>();
  slot->session = start_session(*m->scorer, start, top_k, random_session_id(), m->fingerprint);
  auto doc = slot->session.to_json(m->checkpoint.vocabulary);
  std::unique_lock lock(impl_->sessions_mutex);
  impl_->sessions[slot->session.id] = std::move(slot);
  return doc;
}

nlohmann::json RecipeMindService::step_session(const std::string& id, const nlohmann::json& body) {
  const auto m = impl_->model();
  auto slot = impl_->session(id);
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  std::optional<IngredientId> choice;
  if (body.contains("choice") && body["choice"] != "auto") choice = Impl::id_of(*m, as_name(body["choice"], "choice"));
  std::vector<IngredientId> exclude;
  if (body.contains("exclude")) exclude = Impl::ids_of(*m, body["exclude"], "exclude");

  std::lock_guard lock(slot->mutex);
  if (choice) {
    const auto current = slot->session.current_set();
    if (std::find(current.begin(), current.end(), *choice) != current.end()) {
      throw ApiError(422, "illegal_set", "'" + m->checkpoint.vocabulary.name(*choice) + "' is already in the session");
    }
  }
  try {
    step(slot->session, *m->scorer, choice, exclude);
  } catch (const DataError& e) {
    throw ApiError(422, "illegal_set", e.what());
  }
  return slot->session.to_json(m->checkpoint.vocabulary);
}

nlohmann::json RecipeMindService::get_session(const std::string& id) const {
  const auto m = impl_->model();
  auto slot = impl_->session(id);
  std::lock_guard lock(slot->mutex);
  return slot->session.to_json(m->checkpoint.vocabulary);
}

nlohmann::json RecipeMindService::delete_session(const std::string& id) {
  impl_->model();
  std::unique_lock lock(impl_->sessions_mutex);
  if (impl_->sessions.erase(id) == 0) throw ApiError(404, "session_not_found", "no session '" + id + "'");
  return {{"deleted", id}};
}

bool RecipeMindService::listen(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port)) return false;
  return run();
}

int RecipeMindService::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool RecipeMindService::run() { return impl_->server.listen_after_bind(); }

void RecipeMindService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->options.session_snapshot && loaded()) {
    try {
      save_sessions(*impl_->options.session_snapshot);
    } catch (const std::exception& e) {
      std::cerr << "warning: could not write session snapshot: " << e.what() << '\n';
    }
  }
}

bool RecipeMindService::running() const { return impl_->server.is_running(); }

void RecipeMindService::save_sessions(const std::filesystem::path& path) const {
  const auto m = impl_->model();
  nlohmann::json doc = {{"sessions", nlohmann::json::array()}};
  {
    std::shared_lock lock(impl_->sessions_mutex);
    std::vector<std::string> ids;
    for (const auto& [id, slot] : impl_->sessions) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      auto& slot = impl_->sessions.at(id);
      std::lock_guard session_lock(slot->mutex);
      doc["sessions"].push_back(slot->session.to_json(m->checkpoint.vocabulary));
    }
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace recipemind
