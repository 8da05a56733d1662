#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "avoid/corpus.hpp"
#include "avoid/random.hpp"

// Synthetic corpora for demos and tests: a Watts-Strogatz follow graph and
// news items whose vocabulary separates fake from real.
namespace avoid::synth {

struct SynthConfig {
  std::size_t users = 200;
  std::size_t news = 64;
  std::size_t comments_per_news = 6;
  std::size_t ring_neighbors = 4;  // even; k/2 on each side
  double rewire = 0.1;
  double fake_fraction = 0.5;
  double label_word_rate = 0.45;   // share of class-specific words in a sentence
  std::uint64_t seed = 2024;
};

inline const std::vector<std::string>& fake_words() {
  static const std::vector<std::string> w{"shocking", "miracle", "secret",  "hoax",    "cure",     "leaked",
                                          "conspiracy", "exposed", "banned", "unbelievable", "scandal", "hidden",
                                          "aliens",   "insiders", "bombshell", "cover"};
  return w;
}
inline const std::vector<std::string>& real_words() {
  static const std::vector<std::string> w{"officials", "report",    "announced", "study",    "council", "budget",
                                          "university", "researchers", "quarterly", "policy", "committee", "election",
                                          "agency",    "measured",  "survey",    "review"};
  return w;
}
inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w{"the",  "people", "new",   "today", "city",  "week",  "about", "after",
                                          "news", "public", "local", "group", "state", "year",  "many",  "during",
                                          "plan", "market", "water", "school", "health", "night", "team",  "river"};
  return w;
}
inline const std::vector<std::string>& names() {
  static const std::vector<std::string> w{"Blake", "Moreno", "Okafor", "Lindqvist", "Tanaka", "Dubois",
                                          "Ferreira", "Novak", "Haddad", "Kowalski", "Osei", "Varga"};
  return w;
}

namespace detail {
template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

inline std::string id(const char* prefix, std::size_t i, std::size_t width) {
  std::string n = std::to_string(i);
  if (n.size() < width) n.insert(0, width - n.size(), '0');
  return prefix + n;
}
}  // namespace detail

// Ring lattice with k neighbours, each forward edge rewired with probability p.
inline std::vector<UserRecord> small_world_users(std::size_t n, std::size_t k, double p, Rng& rng) {
  if (n < 3) throw ConfigError("small-world graph needs at least 3 users");
  if (k < 2 || k % 2 || k >= n) throw ConfigError("ring_neighbors must be even and below the user count");
  std::vector<std::set<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j <= k / 2; ++j) {
      const auto t = (i + j) % n;
      adj[i].insert(t);
      adj[t].insert(i);
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j <= k / 2; ++j) {
      const auto t = (i + j) % n;
      if (!adj[i].count(t) || rng.uniform() >= p) continue;
      std::size_t u = static_cast<std::size_t>(rng.below(n));
      int guard = 0;
      while ((u == i || adj[i].count(u)) && ++guard < 100) u = static_cast<std::size_t>(rng.below(n));
      if (u == i || adj[i].count(u)) continue;
      adj[i].erase(t);
      adj[t].erase(i);
      adj[i].insert(u);
      adj[u].insert(i);
    }
  const auto width = std::to_string(n - 1).size();
  std::vector<UserRecord> users(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& u = users[i];
    u.id = detail::id("u", i, width);
    u.follower_count = static_cast<std::int64_t>(std::exp(rng.normal(4.0, 1.2)));
    u.avg_likes = std::round(std::exp(rng.normal(1.5, 0.8)) * 100.0) / 100.0;
    u.repost_count = static_cast<std::int64_t>(std::exp(rng.normal(2.0, 1.0)));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : adj[i])
      if (j > i) users[i].neighbors.push_back(users[j].id);
  return users;
}

inline std::string make_sentence(int label, std::size_t len, double rate, Rng& rng) {
  std::vector<std::string> w;
  const auto& cls = label == 1 ? fake_words() : real_words();
  for (std::size_t k = 0; k < len; ++k) w.push_back(rng.uniform() < rate ? detail::pick(cls, rng) : detail::pick(filler_words(), rng));
  return text::join(w, " ");
}

inline Corpus make_corpus(const SynthConfig& cfg) {
  if (cfg.news < 10) throw ConfigError("synthetic corpus needs at least 10 news items");
  Rng rng = Rng::derive(cfg.seed, "synth");
  auto users = small_world_users(cfg.users, cfg.ring_neighbors, cfg.rewire, rng);

  const auto fakes = static_cast<std::size_t>(std::llround(cfg.fake_fraction * static_cast<double>(cfg.news)));
  const auto width = std::to_string(cfg.news - 1).size();
  std::vector<NewsItem> news(cfg.news);
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < cfg.news; ++i) {
    auto& n = news[i];
    n.id = detail::id("n", i, width);
    const int label = i < fakes ? 1 : 0;
    n.label = label;
    by_label[label].push_back(i);
    const auto sentences = 3 + rng.below(4);
    std::vector<std::string> parts;
    const auto& who = detail::pick(names(), rng);
    parts.push_back(who + " " + make_sentence(label, 6 + rng.below(5), cfg.label_word_rate, rng));
    for (std::uint64_t s = 1; s < sentences; ++s) parts.push_back(make_sentence(label, 6 + rng.below(7), cfg.label_word_rate, rng));
    n.text = text::join(parts, ". ") + ".";
    n.sentences = text::sentences(n.text);
  }
  // Stratified 7:1:2 split.
  for (auto& idx : by_label) {
    rng.shuffle(idx);
    const auto m = idx.size();
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(m)));
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(m))));
    for (std::size_t k = 0; k < m; ++k)
      news[idx[k]].split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
  }

  std::vector<Comment> comments;
  static const std::vector<std::string> opinions{"wow", "really", "agree", "doubt", "interesting", "sad", "great", "hmm", "true", "wrong"};
  static const std::vector<std::string> citing{"according to the official report", "the published data says",
                                               "research confirmed this", "source: government statistics"};
  const auto cwidth = std::to_string(cfg.news * cfg.comments_per_news).size();
  std::size_t cid = 0;
  for (const auto& n : news) {
    auto words = text::words(n.text);
    for (std::size_t k = 0; k < cfg.comments_per_news; ++k) {
      Comment c;
      c.id = detail::id("c", cid++, cwidth);
      c.news_id = n.id;
      c.user_id = detail::pick(users, rng).id;
      std::vector<std::string> w;
      const auto len = 5 + rng.below(6);
      for (std::uint64_t t = 0; t < len; ++t) w.push_back(rng.uniform() < 0.7 ? detail::pick(words, rng) : detail::pick(opinions, rng));
      c.text = text::join(w, " ");
      if (rng.uniform() < 0.3) c.text += " " + detail::pick(citing, rng);
      c.timestamp = static_cast<std::int64_t>(1000 + cid * 7);
      const double r = rng.uniform();
      c.stance = r < 0.5 ? Stance::Pos : (r < 0.7 ? Stance::Neu : Stance::Neg);
      c.engagement = static_cast<std::int64_t>(rng.below(100));
      comments.push_back(std::move(c));
    }
  }
  return Corpus(std::move(news), std::move(comments), std::move(users));
}

}  // namespace avoid::synth
