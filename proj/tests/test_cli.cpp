#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "recipemind/corpus.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

class Workdir {
 public:
  Workdir() : dir_(fs::temp_directory_path() / ("recipemind_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workdir() { fs::remove_all(dir_); }
  fs::path operator/(const std::string& name) const { return dir_ / name; }
  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

// Runs the binary through the shell from `cwd`; `env` is prepended verbatim.
Result run(const fs::path& cwd, const std::string& args, const std::string& env = "", const std::string& input = "") {
  const fs::path out = cwd / ".stdout";
  const fs::path err = cwd / ".stderr";
  const fs::path in = cwd / ".stdin";
  write_file(in, input);
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + " '" + RECIPEMIND_BIN + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "' <'" + in.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Lets the kernel pick a free port, then releases it for the child.
int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof addr;
  int port = -1;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0 &&
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0) {
    port = ntohs(addr.sin_port);
  }
  ::close(fd);
  return port;
}

// A small planted pipeline shared by several cases.
struct Pipeline {
  Workdir dir;
  Pipeline() {
    REQUIRE(run(dir.path(), "generate-corpus --out corpus.jsonl --recipes 150 --ingredients 12 --clusters 3 --seed 2")
                .code == 0);
    REQUIRE(run(dir.path(), "ingest corpus.jsonl --out ing --min-ingredient-count 5 --min-subset-count 3 --max-size 3")
                .code == 0);
    REQUIRE(run(dir.path(), "build-dataset ing --out data --train-sizes 2,3 --test-only-sizes \"\" --seed 4").code == 0);
  }
  std::string tiny_model() const {
    return "--hidden-dim 16 --embed-dim 16 --heads 2 --blocks 2 --batch-size 32 --lr 3e-3 --weight-decay 0";
  }
};

}  // namespace

TEST_CASE("help, version and usage errors") {
  Workdir dir;
  auto r = run(dir.path(), "--help");
  CHECK(r.code == 0);
  for (const char* cmd : {"ingest", "build-dataset", "stats", "train", "evaluate", "ablate", "ideate", "serve"}) {
    CHECK(r.out.find(cmd) != std::string::npos);
  }
  r = run(dir.path(), "train --help");
  CHECK(r.code == 0);
  CHECK(r.out.find("--hidden-dim") != std::string::npos);
  CHECK(r.out.find("RECIPEMIND_HIDDEN_DIM") != std::string::npos);
  CHECK(run(dir.path(), "--version").code == 0);
  CHECK(run(dir.path(), "").code == 1);
  CHECK(run(dir.path(), "frobnicate").code == 1);
  CHECK(run(dir.path(), "train").code == 1);
  CHECK(run(dir.path(), "ideate x.ckpt --start a --steps many").code == 1);
  CHECK(run(dir.path(), "serve x.ckpt --port 70000").code == 1);
}

TEST_CASE("ingest matches the brute-force counter and is byte-stable") {
  Workdir dir;
  std::mt19937_64 rng(11);
  const auto recipes = testing_support::random_corpus(rng, 9, 40);
  {
    std::ofstream out(dir / "corpus.jsonl");
    for (const auto& r : recipes) out << json{{"id", r.id}, {"ingredients", r.ingredients}}.dump() << '\n';
  }
  const std::string args = "ingest corpus.jsonl --out ing --min-ingredient-count 1 --min-subset-count 1 --max-size 7";
  REQUIRE(run(dir.path(), args).code == 0);
  const auto vocab = recipemind::IngredientVocabulary::load(dir / "ing/vocabulary.tsv");
  const auto counter = recipemind::SubsetCounter::load(dir / "ing/counter.tsv");
  const auto oracle = testing_support::brute_force_counts(recipes, vocab, 7);
  CHECK(counter.size() == oracle.size());
  for (const auto& [subset, count] : oracle) CHECK(counter.at(subset) == count);
  CHECK(counter.total_recipes() == recipes.size());

  const auto manifest = json::parse(slurp(dir / "ing/ingest.manifest.json"));
  CHECK(manifest["command"] == "ingest");
  CHECK(manifest["config"]["min-subset-count"] == "1");
  CHECK(manifest["outputs"]["counter"]["sha256"].get<std::string>().size() == 64);

  const std::string vocab_bytes = slurp(dir / "ing/vocabulary.tsv");
  const std::string counter_bytes = slurp(dir / "ing/counter.tsv");
  REQUIRE(run(dir.path(), args, "RECIPEMIND_THREADS=3").code == 0);
  CHECK(slurp(dir / "ing/vocabulary.tsv") == vocab_bytes);
  CHECK(slurp(dir / "ing/counter.tsv") == counter_bytes);
}

TEST_CASE("ingest data errors") {
  Workdir dir;
  write_file(dir / "empty.jsonl", "");
  auto r = run(dir.path(), "ingest empty.jsonl --out x");
  CHECK(r.code == 2);
  CHECK(r.err.find("empty") != std::string::npos);

  write_file(dir / "broken.jsonl", "{\"id\":\"a\",\"ingredients\":[\"x\"]}\n{\"id\":\"b\",\"ingredients\":7}\n");
  r = run(dir.path(), "ingest broken.jsonl --out x --min-ingredient-count 1");
  CHECK(r.code == 2);
  CHECK(r.err.find("line 2") != std::string::npos);
  CHECK(run(dir.path(), "ingest missing.jsonl --out x").code == 2);
}

TEST_CASE("pipeline commands, determinism and exit codes") {
  Pipeline p;
  const auto& d = p.dir;

  SUBCASE("build-dataset") {
    const auto split = json::parse(slurp(d / "data/split.json"));
    CHECK(split["seed"] == 4);
    for (const char* f : {"train.tsv", "validation.tsv", "test.tsv", "vocabulary.tsv", "build-dataset.manifest.json"}) {
      CHECK(fs::exists(d / "data" / f));
    }
    const std::string train_bytes = slurp(d / "data/train.tsv");
    REQUIRE(run(d.path(), "build-dataset ing --out data2 --train-sizes 2,3 --test-only-sizes \"\" --seed 4").code == 0);
    CHECK(slurp(d / "data2/train.tsv") == train_bytes);
    CHECK(run(d.path(), "build-dataset ing --out bad --ratios 0.5,0.5,0.5").code == 1);
    CHECK(run(d.path(), "build-dataset ing --out bad --delta 0").code == 1);
    CHECK(run(d.path(), "build-dataset nowhere --out bad").code == 2);
  }

  SUBCASE("stats") {
    auto a = run(d.path(), "stats data");
    auto b = run(d.path(), "stats data/train.tsv");
    CHECK(a.code == 0);
    CHECK(b.code == 0);
    CHECK(a.out.find("size") == 0);
    CHECK(a.out == run(d.path(), "stats data").out);
    write_file(d / "empty.tsv", "");
    auto e = run(d.path(), "stats empty.tsv");
    CHECK(e.code == 0);
    CHECK(std::count(e.out.begin(), e.out.end(), '\n') == 1);
  }

  SUBCASE("train overfits, is repeatable, and feeds the other commands") {
    const std::string train = "train data --out m.ckpt --seed 3 --dropout 0 --epochs 120 --patience 120 " + p.tiny_model();
    auto r = run(d.path(), train);
    REQUIRE(r.code == 0);
    const auto manifest = json::parse(slurp(d / "m.ckpt.manifest.json"));
    double best_train = 1e9;
    for (const auto& e : manifest["history"]) best_train = std::min(best_train, e["train_loss"].get<double>());
    CHECK(best_train < 0.05);

    const std::string ckpt_bytes = slurp(d / "m.ckpt");
    REQUIRE(run(d.path(), train).code == 0);
    CHECK(slurp(d / "m.ckpt") == ckpt_bytes);
    CHECK(json::parse(slurp(d / "m.ckpt.manifest.json"))["history"] == manifest["history"]);

    auto ev = run(d.path(), "evaluate m.ckpt data --out metrics.json");
    CHECK(ev.code == 0);
    CHECK(ev.out.find("naive_mean") != std::string::npos);
    CHECK(json::parse(slurp(d / "metrics.json")).contains("recipemind"));

    const auto vocab = recipemind::IngredientVocabulary::load(d / "data/vocabulary.tsv");
    const std::string a = vocab.name(0), b = vocab.name(1), c = vocab.name(2);
    auto ideate = run(d.path(), "ideate m.ckpt --start \"" + a + "," + b + "\" --steps 8 --out s1.json");
    REQUIRE(ideate.code == 0);
    CHECK(ideate.out.find("top-3") != std::string::npos);
    CHECK(ideate.out.find("final set (10)") != std::string::npos);
    REQUIRE(run(d.path(), "ideate m.ckpt --start \"" + a + "," + b + "\" --steps 8 --out s2.json").code == 0);
    auto s1 = json::parse(slurp(d / "s1.json"));
    auto s2 = json::parse(slurp(d / "s2.json"));
    CHECK(s1["steps"].size() == 8);
    s1.erase("created_at");
    s2.erase("created_at");
    CHECK(s1 == s2);
    auto zero = run(d.path(), "ideate m.ckpt --start \"" + a + "\" --steps 0 --out \"\"");
    CHECK(zero.code == 0);
    CHECK(zero.out.find("final set (1)") != std::string::npos);
    CHECK(run(d.path(), "ideate m.ckpt --start \"" + a + ",saffron\"").code == 2);
    CHECK(run(d.path(), "ideate m.ckpt --start \"" + a + "\" --out /dev/null/x").code == 3);

    auto pick = run(d.path(), "ideate m.ckpt --start \"" + a + "\" --interactive --out \"\"", "", "2\n" + c + "\nq\n");
    CHECK(pick.code == 0);
    CHECK(pick.out.find("final set (3)") != std::string::npos);

    auto pred = run(d.path(), "predict m.ckpt --set \"" + a + "\" --addition \"" + b + "\"");
    CHECK(pred.code == 0);
    CHECK(std::isfinite(std::stod(pred.out)));
    CHECK(run(d.path(), "predict m.ckpt --set \"" + a + "\" --addition \"" + a + "\"").code == 2);
    CHECK(run(d.path(), "predict nope.ckpt --set a --addition b").code == 2);
    CHECK(run(d.path(), "serve nope.ckpt --port 0").code == 2);
  }

  SUBCASE("ablate emits the comparison table") {
    auto r = run(d.path(), "ablate data --variants default,deep_sets --seeds 1,2 --epochs 2 --out ablate.json " +
                               p.tiny_model());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("RMSE") != std::string::npos);
    CHECK(r.out.find("PCORR") != std::string::npos);
    CHECK(r.out.find("deep_sets") != std::string::npos);
    CHECK(r.out.find("naive_mean") != std::string::npos);
    CHECK(json::parse(slurp(d / "ablate.json"))["runs"].size() == 4);
    CHECK(run(d.path(), "ablate data --variants default,transformer --epochs 1").code == 1);
  }

  SUBCASE("config file, environment and flag precedence") {
    REQUIRE(run(d.path(), "train data --out m.ckpt --epochs 1 " + p.tiny_model()).code == 0);
    const auto vocab = recipemind::IngredientVocabulary::load(d / "data/vocabulary.tsv");
    const std::string start = "--start \"" + vocab.name(0) + "\" --out \"\"";
    write_file(d / "cfg.json", R"({"threads": 1, "ideate": {"steps": 2}})");
    auto steps = [](const std::string& out) { return out.find("final set (" ) == std::string::npos ? -1 :
        std::stoi(out.substr(out.find("final set (") + 11)) - 1; };
    CHECK(steps(run(d.path(), "--config cfg.json ideate m.ckpt " + start).out) == 2);
    CHECK(steps(run(d.path(), "--config cfg.json ideate m.ckpt " + start, "RECIPEMIND_STEPS=3").out) == 3);
    CHECK(steps(run(d.path(), "--config cfg.json ideate m.ckpt --steps 4 " + start, "RECIPEMIND_STEPS=3").out) == 4);
    CHECK(steps(run(d.path(), "ideate m.ckpt " + start).out) == 8);
    write_file(d / "typo.json", R"({"ideate": {"stepz": 2}})");
    CHECK(run(d.path(), "--config typo.json ideate m.ckpt " + start).code == 1);
    write_file(d / "broken.json", "{");
    CHECK(run(d.path(), "--config broken.json ideate m.ckpt " + start).code == 1);
  }
}

TEST_CASE("served score equals the CLI prediction") {
  Pipeline p;
  const auto& d = p.dir;
  REQUIRE(run(d.path(), "train data --out m.ckpt --epochs 2 " + p.tiny_model()).code == 0);
  const auto vocab = recipemind::IngredientVocabulary::load(d / "data/vocabulary.tsv");

  const int port = free_port();
  REQUIRE(port > 0);
  const std::string cmd = "cd '" + d.path().string() + "' && RECIPEMIND_PORT=" + std::to_string(port) + " '" +
                          RECIPEMIND_BIN + "' serve m.ckpt >serve.log 2>&1 & echo $!";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  REQUIRE(pipe);
  int pid = 0;
  REQUIRE(std::fscanf(pipe.get(), "%d", &pid) == 1);

  httplib::Client client("127.0.0.1", port);
  httplib::Result health;
  for (int i = 0; i < 200 && !(health = client.Get("/healthz")); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  REQUIRE(health);
  CHECK(health->status == 200);

  for (std::size_t i = 1; i < 4; ++i) {
    const std::string a = vocab.name(0), b = vocab.name(i);
    auto served = client.Post("/score", json{{"set", {a}}, {"addition", b}}.dump(), "application/json");
    INFO("http error " << httplib::to_string(served.error()) << "; log: " << slurp(d / "serve.log"));
    REQUIRE(served);
    const double via_http = json::parse(served->body)["score"].get<double>();
    const double via_cli = std::stod(run(d.path(), "predict m.ckpt --set \"" + a + "\" --addition \"" + b + "\"").out);
    CHECK(std::abs(via_http - via_cli) <= 1e-12);
  }
  ::kill(pid, SIGTERM);
  bool down = false;
  for (int i = 0; i < 200 && !down; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    down = !client.Get("/healthz");
  }
  CHECK(down);
}
