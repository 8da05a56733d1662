#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <thread>

#include "avoid/remote.hpp"

using namespace avoid;

namespace {

// Local HTTP server on an ephemeral port; handlers are set per test.
struct LocalServer {
  httplib::Server srv;
  std::thread th;
  int port = 0;

  LocalServer() = default;
  void start() {
    port = srv.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~LocalServer() {
    srv.stop();
    if (th.joinable()) th.join();
  }
  RemoteConfig config() const {
    RemoteConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port);
    c.api_key_env = "AVOID_TEST_UNSET_KEY";
    c.timeout_s = 5;
    return c;
  }
};

json completion(const std::string& content, std::optional<std::pair<int, int>> usage = std::nullopt) {
  json j{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
  if (usage) j["usage"] = {{"prompt_tokens", usage->first}, {"completion_tokens", usage->second}};
  return j;
}

DecisionRequest diffuser_request() {
  return make_request(PromptKind::DiffuserAction,
                      {{"persona", "p"}, {"news", "n"}, {"news_head", "n"}, {"stm", "(empty)"}, {"ltm", "(empty)"}},
                      diffuser_actions());
}

}  // namespace

TEST_CASE("retryable statuses") {
  CHECK(detail::retryable(0));
  CHECK(detail::retryable(429));
  CHECK(detail::retryable(503));
  CHECK(detail::retryable(408));
  CHECK_FALSE(detail::retryable(400));
  CHECK_FALSE(detail::retryable(404));
}

TEST_CASE("completion reply uses reported usage") {
  LocalServer s;
  json seen;
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    res.set_content(completion("stance pos\nforward", std::make_pair(123, 7)).dump(), "application/json");
  });
  s.start();
  RemoteBackend b(s.config(), [](int) {});
  auto req = diffuser_request();
  auto r = b.decide(req);
  CHECK(r.text == "stance pos\nforward");
  CHECK(r.prompt_tokens == 123);
  CHECK(r.completion_tokens == 7);
  REQUIRE(r.stance.has_value());
  CHECK(*r.stance == Stance::Pos);
  CHECK(seen["model"] == "gpt-4o-mini");
  CHECK(seen["messages"][1]["content"] == req.prompt);
  CHECK(seen["temperature"].get<double>() == doctest::Approx(0.7));
}

TEST_CASE("missing usage falls back to whitespace counts") {
  LocalServer s;
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("one two three").dump(), "application/json");
  });
  s.start();
  RemoteBackend b(s.config(), [](int) {});
  auto req = diffuser_request();
  auto r = b.decide(req);
  CHECK(r.completion_tokens == 3);
  CHECK(r.prompt_tokens == static_cast<std::int64_t>(text::whitespace_tokens(req.prompt)));
}

TEST_CASE("transient failures are retried with doubling backoff") {
  LocalServer s;
  std::atomic<int> hits{0};
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    int n = ++hits;
    if (n == 1) {
      res.status = 429;
      res.set_content("slow down", "text/plain");
    } else if (n == 2) {
      res.status = 503;
      res.set_content("busy", "text/plain");
    } else {
      res.set_content(completion("like").dump(), "application/json");
    }
  });
  s.start();
  std::vector<int> sleeps;
  auto cfg = s.config();
  cfg.backoff_ms = 10;
  RemoteBackend b(cfg, [&](int ms) { sleeps.push_back(ms); });
  auto r = b.decide(diffuser_request());
  CHECK(r.text == "like");
  CHECK(hits == 3);
  CHECK(sleeps == std::vector<int>{10, 20});
}

TEST_CASE("retries are bounded") {
  LocalServer s;
  std::atomic<int> hits{0};
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 500;
  });
  s.start();
  auto cfg = s.config();
  cfg.max_retries = 2;
  RemoteBackend b(cfg, [](int) {});
  try {
    b.decide(diffuser_request());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.status() == 500);
  }
  CHECK(hits == 3);
}

TEST_CASE("client errors are not retried") {
  LocalServer s;
  std::atomic<int> hits{0};
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 401;
    res.set_content("bad key", "text/plain");
  });
  s.start();
  RemoteBackend b(s.config(), [](int) {});
  CHECK_THROWS_AS(b.decide(diffuser_request()), TransportError);
  CHECK(hits == 1);
}

TEST_CASE("malformed completion bodies raise TransportError") {
  LocalServer s;
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices": []})", "application/json");
  });
  s.srv.Post("/v1/broken", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content("not json", "application/json");
  });
  s.start();
  RemoteBackend b(s.config(), [](int) {});
  CHECK_THROWS_AS(b.decide(diffuser_request()), TransportError);
  auto cfg = s.config();
  cfg.chat_path = "/v1/broken";
  RemoteBackend broken(cfg, [](int) {});
  CHECK_THROWS_AS(broken.decide(diffuser_request()), TransportError);
}

TEST_CASE("unreachable server raises after retries") {
  RemoteConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.max_retries = 1;
  cfg.timeout_s = 1;
  int sleeps = 0;
  RemoteBackend b(cfg, [&](int) { ++sleeps; });
  try {
    b.decide(diffuser_request());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.status() == 0);
  }
  CHECK(sleeps == 1);
}

TEST_CASE("api key is sent as bearer token") {
  LocalServer s;
  std::string auth;
  s.srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    res.set_content(completion("view").dump(), "application/json");
  });
  s.start();
  ::setenv("AVOID_TEST_KEY", "sk-test", 1);
  auto cfg = s.config();
  cfg.api_key_env = "AVOID_TEST_KEY";
  RemoteBackend b(cfg, [](int) {});
  b.decide(diffuser_request());
  CHECK(auth == "Bearer sk-test");
  ::unsetenv("AVOID_TEST_KEY");
}

TEST_CASE("remote embeddings are normalised and checked") {
  LocalServer s;
  std::string input;
  s.srv.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = json::parse(req.body);
    input = body["input"];
    std::vector<double> v{3.0, 4.0, 0.0};
    if (input == "zero") v = {0.0, 0.0, 0.0};
    if (input == "wide") v = {1.0, 0.0, 0.0, 0.0};
    res.set_content(json{{"data", json::array({{{"embedding", v}}})}}.dump(), "application/json");
  });
  s.start();
  RemoteEmbeddingProvider p(s.config(), 3, [](int) {});
  auto e = p.embed("  hello \n world ");
  CHECK(input == "hello world");
  CHECK(e.values[0] == doctest::Approx(0.6));
  CHECK(e.values[1] == doctest::Approx(0.8));
  CHECK(p.kind() == "remote");
  CHECK_THROWS_AS(p.embed("zero"), DomainError);
  CHECK_THROWS_AS(p.embed("wide"), TransportError);
  CHECK_THROWS_AS(p.embed("   "), InputError);
}
