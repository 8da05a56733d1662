#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

// Fresh per-process scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("avoid-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

#include <functional>

#include "avoid/backend.hpp"

// Backend driven by a callback; replies are counted like the mock.
class ScriptedBackend : public avoid::DecisionBackend {
 public:
  using Fn = std::function<std::string(const avoid::DecisionRequest&)>;
  explicit ScriptedBackend(Fn fn) : fn_(std::move(fn)) {}
  std::string name() const override { return "scripted"; }
  avoid::DecisionResponse decide(const avoid::DecisionRequest& req) override {
    ++calls;
    avoid::DecisionResponse r;
    r.text = fn_(req);
    r.prompt_tokens = static_cast<std::int64_t>(avoid::text::whitespace_tokens(req.prompt));
    r.completion_tokens = static_cast<std::int64_t>(avoid::text::whitespace_tokens(r.text));
    return r;
  }
  int calls = 0;

 private:
  Fn fn_;
};
