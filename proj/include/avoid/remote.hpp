#pragma once

// HTTP clients for an OpenAI-compatible chat-completion and embedding service.
// Kept out of the other headers so only users of the remote path pull in httplib.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "avoid/backend.hpp"
#include "avoid/embed.hpp"

namespace avoid {

struct RemoteConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string chat_path = "/v1/chat/completions";
  std::string embed_path = "/v1/embeddings";
  std::string model = "gpt-4o-mini";
  std::string embed_model = "text-embedding-3-small";
  std::string api_key_env = "AVOID_API_KEY";
  double temperature = 0.7;
  double top_p = 0.9;
  int max_retries = 3;
  int backoff_ms = 500;  // doubled after each failed attempt
  int timeout_s = 60;
};

namespace detail {

inline bool retryable(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

// POSTs JSON with retry and exponential backoff. Status 0 means no response.
inline json post_json(const RemoteConfig& cfg, const std::string& path, const json& body,
                      const std::function<void(int)>& sleep_ms) {
  httplib::Client cli(cfg.base_url);
  cli.set_connection_timeout(cfg.timeout_s, 0);
  cli.set_read_timeout(cfg.timeout_s, 0);
  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);
  const std::string payload = body.dump();
  int delay = cfg.backoff_ms;
  int status = 0;
  std::string detail;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      sleep_ms(delay);
      delay *= 2;
    }
    auto res = cli.Post(path, headers, payload, "application/json");
    if (!res) {
      status = 0;
      detail = httplib::to_string(res.error());
      continue;
    }
    status = res->status;
    if (status >= 200 && status < 300) {
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw TransportError(status, std::string("malformed response body: ") + e.what());
      }
    }
    detail = res->body.substr(0, 200);
    if (!retryable(status)) break;
  }
  throw TransportError(status, "request to " + cfg.base_url + path + " failed: " + detail);
}

inline void real_sleep(int ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); }

}  // namespace detail

class RemoteBackend : public DecisionBackend {
 public:
  explicit RemoteBackend(RemoteConfig cfg, std::function<void(int)> sleep_ms = detail::real_sleep)
      : cfg_(std::move(cfg)), sleep_(std::move(sleep_ms)) {}

  std::string name() const override { return "remote"; }

  DecisionResponse decide(const DecisionRequest& req) override {
    json body{{"model", cfg_.model},
              {"temperature", cfg_.temperature},
              {"top_p", cfg_.top_p},
              {"messages",
               json::array({{{"role", "system"}, {"content", "You are a social media user in a simulation."}},
                            {{"role", "user"}, {"content", req.prompt}}})}};
    json reply = detail::post_json(cfg_, cfg_.chat_path, body, sleep_);
    DecisionResponse r;
    try {
      r.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw TransportError(200, std::string("unexpected completion shape: ") + e.what());
    }
    const auto usage = reply.value("usage", json::object());
    r.prompt_tokens = usage.value("prompt_tokens", static_cast<std::int64_t>(text::whitespace_tokens(req.prompt)));
    r.completion_tokens = usage.value("completion_tokens", static_cast<std::int64_t>(text::whitespace_tokens(r.text)));
    if (req.kind == PromptKind::DiffuserAction) {
      for (const auto& w : text::words(r.text))
        if (auto s = parse_stance(w)) {
          r.stance = s;
          break;
        }
    }
    return r;
  }

 private:
  RemoteConfig cfg_;
  std::function<void(int)> sleep_;
};

class RemoteEmbeddingProvider final : public EmbeddingProvider {
 public:
  RemoteEmbeddingProvider(RemoteConfig cfg, std::size_t dim, std::function<void(int)> sleep_ms = detail::real_sleep)
      : cfg_(std::move(cfg)), dim_(dim), sleep_(std::move(sleep_ms)) {}

  Embedding embed(std::string_view raw) const override {
    const std::string t = text::normalize_ws(raw);
    if (t.empty()) throw InputError("embed_text: empty text");
    json reply = detail::post_json(cfg_, cfg_.embed_path, {{"model", cfg_.embed_model}, {"input", t}}, sleep_);
    std::vector<double> v;
    try {
      v = reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw TransportError(200, std::string("unexpected embedding shape: ") + e.what());
    }
    if (v.size() != dim_) throw TransportError(200, "embedding width " + std::to_string(v.size()) + " != " + std::to_string(dim_));
    if (!vec::normalize(v)) throw DomainError("remote embedding is a zero vector");
    return Embedding(std::move(v));
  }
  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "remote"; }

 private:
  RemoteConfig cfg_;
  std::size_t dim_;
  std::function<void(int)> sleep_;
};

}  // namespace avoid
