#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "recipemind/checkpoint.hpp"

namespace recipemind {

// Failed request: HTTP status plus a machine-readable code, one of
// unknown_ingredient, illegal_set, session_not_found, bad_request,
// model_unavailable.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}

  int status() const { return status_; }
  const std::string& code() const { return code_; }
  nlohmann::json body() const;

 private:
  int status_;
  std::string code_;
};

struct ServiceOptions {
  // Worker threads for request handling.
  unsigned threads = 4;
  // Threads used to score candidates inside one /recommend call.
  unsigned scoring_threads = 1;
  // Sessions are restored from here at load time and written back on stop.
  std::optional<std::filesystem::path> session_snapshot;
};

// JSON facade over one checkpoint. The handler methods are the HTTP
// endpoints minus transport, and throw ApiError on failure.
class RecipeMindService {
 public:
  explicit RecipeMindService(ServiceOptions options = {});
  ~RecipeMindService();
  RecipeMindService(const RecipeMindService&) = delete;
  RecipeMindService& operator=(const RecipeMindService&) = delete;

  // `fingerprint` identifies the checkpoint, normally the file's SHA-256.
  void load(Checkpoint checkpoint, std::string fingerprint);
  void load_file(const std::filesystem::path& path);
  bool loaded() const;

  nlohmann::json healthz() const;                                       // GET /healthz
  nlohmann::json ingredients(const std::string& query, long limit) const;  // GET /ingredients
  nlohmann::json score(const nlohmann::json& body) const;                // POST /score
  nlohmann::json recommend(const nlohmann::json& body) const;            // POST /recommend
  nlohmann::json create_session(const nlohmann::json& body);             // POST /sessions
  nlohmann::json step_session(const std::string& id, const nlohmann::json& body);  // POST /sessions/{id}/step
  nlohmann::json get_session(const std::string& id) const;               // GET /sessions/{id}
  nlohmann::json delete_session(const std::string& id);                  // DELETE /sessions/{id}

  // Binds and serves until stop(). Returns false if binding fails.
  bool listen(const std::string& host, int port);
  // Binds to a free port and returns it (or -1); serve with run().
  int bind_any_port(const std::string& host);
  bool run();
  void stop();
  bool running() const;

  void save_sessions(const std::filesystem::path& path) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace recipemind
