#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace avoid::text {

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80 || c == '_'; }

// Splits on word boundaries. Non-ASCII bytes are treated as word characters so
// multi-byte UTF-8 sequences stay inside one token. ASCII letters are lowered.
inline std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (is_word_byte(c)) {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Same boundaries as words() but case preserved.
inline std::vector<std::string> raw_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::size_t whitespace_tokens(std::string_view s) {
  std::size_t n = 0;
  bool in = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      in = false;
    } else if (!in) {
      in = true;
      ++n;
    }
  }
  return n;
}

inline std::string normalize_ws(std::string_view s) {
  std::string out;
  bool pending = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Sentence split on terminal punctuation (. ! ? and newlines), then word
// tokenization; empty sentences are dropped.
inline std::vector<std::vector<std::string>> sentences(std::string_view s) {
  std::vector<std::vector<std::string>> out;
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    auto toks = words(s.substr(start, end - start));
    if (!toks.empty()) out.push_back(std::move(toks));
    start = end + 1;
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '.' || c == '!' || c == '?' || c == '\n') flush(i);
  }
  if (start < s.size()) flush(s.size());
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// First n whitespace tokens of s.
inline std::string head_tokens(std::string_view s, std::size_t n) {
  std::string out;
  std::size_t count = 0;
  bool in = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      in = false;
      continue;
    }
    if (!in) {
      if (count == n) break;
      if (count) out.push_back(' ');
      ++count;
      in = true;
    }
    out.push_back(static_cast<char>(c));
  }
  return out;
}

}  // namespace avoid::text
