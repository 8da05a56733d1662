#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "avoid/error.hpp"
#include "avoid/text.hpp"
#include "json.hpp"

namespace avoid {

using json = nlohmann::json;

enum class Split { Train, Val, Test };
enum class Stance { Pos, Neu, Neg };
enum class Action { Comment, Forward, Like, View, FactCheck, Warn };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline const char* to_string(Stance s) {
  switch (s) {
    case Stance::Pos: return "pos";
    case Stance::Neu: return "neu";
    case Stance::Neg: return "neg";
  }
  return "?";
}

inline const char* to_string(Action a) {
  switch (a) {
    case Action::Comment: return "comment";
    case Action::Forward: return "forward";
    case Action::Like: return "like";
    case Action::View: return "view";
    case Action::FactCheck: return "fact_check";
    case Action::Warn: return "warn";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

inline std::optional<Stance> parse_stance(std::string_view s) {
  if (s == "pos") return Stance::Pos;
  if (s == "neu") return Stance::Neu;
  if (s == "neg") return Stance::Neg;
  return std::nullopt;
}

inline std::optional<Action> parse_action(std::string_view s) {
  for (Action a : {Action::Comment, Action::Forward, Action::Like, Action::View, Action::FactCheck,
                   Action::Warn})
    if (s == to_string(a)) return a;
  return std::nullopt;
}

inline bool is_verifier_only(Action a) { return a == Action::FactCheck || a == Action::Warn; }

struct TruncationCaps {
  std::size_t max_sentences = 50;
  std::size_t max_tokens = 25;
};

struct NewsItem {
  std::string id;
  std::string text;
  std::optional<int> label;  // 1 = fake, 0 = real
  Split split = Split::Train;
  std::vector<std::vector<std::string>> sentences;
};

struct Comment {
  std::string id;
  std::string news_id;
  std::string user_id;
  std::string text;
  std::int64_t timestamp = 0;
  std::optional<Stance> stance;
  std::int64_t engagement = 0;
};

struct UserRecord {
  std::string id;
  std::int64_t follower_count = 0;
  double avg_likes = 0.0;
  std::int64_t repost_count = 0;
  std::vector<std::string> neighbors;
};

struct ActionEvent {
  std::string agent_id;
  int step = 0;
  Action action = Action::View;
  std::optional<std::string> payload_text;
  std::optional<Stance> stance;

  friend bool operator==(const ActionEvent&, const ActionEvent&) = default;
};

struct CascadeEdge {
  std::string source;
  std::string target;
  int step = 0;
  Action action = Action::Forward;

  friend bool operator==(const CascadeEdge&, const CascadeEdge&) = default;
};

// Directed propagation graph for one news item. Nodes are participating
// agents only; seeds are the agents the item was posted by.
struct CascadeGraph {
  std::string news_id;
  std::set<std::string> nodes;
  std::vector<CascadeEdge> edges;
  std::vector<std::string> seeds;
  std::vector<ActionEvent> events;

  friend bool operator==(const CascadeGraph&, const CascadeGraph&) = default;

  // Throws IntegrityError on the first violated invariant.
  void validate() const {
    if (seeds.empty()) throw IntegrityError("cascade " + news_id + ": empty seed set");
    for (const auto& s : seeds)
      if (!nodes.count(s)) throw IntegrityError("cascade " + news_id + ": seed " + s + " not a node");
    std::set<std::pair<std::string, std::string>> seen;
    std::map<std::string, std::vector<const CascadeEdge*>> in_edges, out_edges;
    for (const auto& e : edges) {
      if (!nodes.count(e.source) || !nodes.count(e.target))
        throw IntegrityError("cascade " + news_id + ": edge " + e.source + "->" + e.target +
                             " references absent node");
      if (e.step < 0) throw IntegrityError("cascade " + news_id + ": negative edge step");
      if (!seen.emplace(e.source, e.target).second)
        throw IntegrityError("cascade " + news_id + ": duplicate edge " + e.source + "->" + e.target);
      in_edges[e.target].push_back(&e);
      out_edges[e.source].push_back(&e);
    }
    for (const auto& [node, ins] : in_edges) {
      auto it = out_edges.find(node);
      if (it == out_edges.end()) continue;
      for (const auto* a : ins)
        for (const auto* b : it->second)
          if (a->step > b->step)
            throw IntegrityError("cascade " + news_id + ": step decreases along path through " + node);
    }
    std::set<std::string> reached(seeds.begin(), seeds.end());
    std::queue<std::string> q;
    for (const auto& s : seeds) q.push(s);
    while (!q.empty()) {
      auto u = q.front();
      q.pop();
      auto it = out_edges.find(u);
      if (it == out_edges.end()) continue;
      for (const auto* e : it->second)
        if (reached.insert(e->target).second) q.push(e->target);
    }
    for (const auto& n : nodes)
      if (!reached.count(n)) throw IntegrityError("cascade " + news_id + ": node " + n + " unreachable from seeds");
    for (const auto& ev : events)
      if (ev.step < 0) throw IntegrityError("cascade " + news_id + ": negative event step");
  }
};

// ---- JSON mapping -------------------------------------------------------

inline json to_json(const NewsItem& n) {
  json j{{"id", n.id}, {"text", n.text}, {"split", to_string(n.split)}, {"sentences", n.sentences}};
  j["label"] = n.label ? json(*n.label) : json(nullptr);
  return j;
}

inline json to_json(const Comment& c) {
  json j{{"id", c.id},       {"news_id", c.news_id},     {"user_id", c.user_id},
         {"text", c.text},   {"timestamp", c.timestamp}, {"engagement", c.engagement}};
  j["stance"] = c.stance ? json(to_string(*c.stance)) : json(nullptr);
  return j;
}

inline json to_json(const UserRecord& u) {
  return json{{"id", u.id},
              {"follower_count", u.follower_count},
              {"avg_likes", u.avg_likes},
              {"repost_count", u.repost_count},
              {"neighbors", u.neighbors}};
}

inline json to_json(const ActionEvent& e) {
  json j{{"agent_id", e.agent_id}, {"step", e.step}, {"action", to_string(e.action)}};
  if (e.payload_text) j["payload_text"] = *e.payload_text;
  if (e.stance) j["stance"] = to_string(*e.stance);
  return j;
}

inline json to_json(const CascadeGraph& g) {
  json edges = json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"source", e.source}, {"target", e.target}, {"step", e.step}, {"action", to_string(e.action)}});
  json events = json::array();
  for (const auto& e : g.events) events.push_back(to_json(e));
  return json{{"news_id", g.news_id},
              {"nodes", std::vector<std::string>(g.nodes.begin(), g.nodes.end())},
              {"seeds", g.seeds},
              {"edges", edges},
              {"events", events}};
}

namespace detail {

template <typename T>
T req(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(std::string("missing field '") + key + "'");
  return j.at(key).get<T>();
}

inline Action req_action(const json& j, const char* key) {
  auto s = req<std::string>(j, key);
  auto a = parse_action(s);
  if (!a) throw Error("unknown action '" + s + "'");
  return *a;
}

inline std::optional<Stance> opt_stance(const json& j) {
  if (!j.contains("stance") || j["stance"].is_null()) return std::nullopt;
  auto s = j["stance"].get<std::string>();
  auto st = parse_stance(s);
  if (!st) throw Error("unknown stance '" + s + "'");
  return st;
}

}  // namespace detail

inline NewsItem news_from_json(const json& j, const TruncationCaps& caps = {}) {
  NewsItem n;
  n.id = detail::req<std::string>(j, "id");
  n.text = detail::req<std::string>(j, "text");
  if (j.contains("label") && !j["label"].is_null()) {
    int l = j["label"].get<int>();
    if (l != 0 && l != 1) throw Error("label must be 0 or 1");
    n.label = l;
  }
  auto sp = parse_split(detail::req<std::string>(j, "split"));
  if (!sp) throw Error("split must be train|val|test");
  n.split = *sp;
  if (j.contains("sentences") && !j["sentences"].empty())
    n.sentences = j["sentences"].get<std::vector<std::vector<std::string>>>();
  else
    n.sentences = text::sentences(n.text);
  if (n.sentences.size() > caps.max_sentences) n.sentences.resize(caps.max_sentences);
  for (auto& s : n.sentences)
    if (s.size() > caps.max_tokens) s.resize(caps.max_tokens);
  std::erase_if(n.sentences, [](const auto& s) { return s.empty(); });
  return n;
}

inline Comment comment_from_json(const json& j) {
  Comment c;
  c.id = detail::req<std::string>(j, "id");
  c.news_id = detail::req<std::string>(j, "news_id");
  c.user_id = detail::req<std::string>(j, "user_id");
  c.text = detail::req<std::string>(j, "text");
  c.timestamp = detail::req<std::int64_t>(j, "timestamp");
  if (c.timestamp < 0) throw Error("timestamp must be >= 0");
  c.stance = detail::opt_stance(j);
  c.engagement = j.value("engagement", std::int64_t{0});
  return c;
}

inline UserRecord user_from_json(const json& j) {
  UserRecord u;
  u.id = detail::req<std::string>(j, "id");
  u.follower_count = detail::req<std::int64_t>(j, "follower_count");
  u.avg_likes = detail::req<double>(j, "avg_likes");
  u.repost_count = detail::req<std::int64_t>(j, "repost_count");
  if (u.follower_count < 0 || u.avg_likes < 0 || u.repost_count < 0)
    throw Error("user counters must be non-negative");
  if (j.contains("neighbors")) u.neighbors = j["neighbors"].get<std::vector<std::string>>();
  return u;
}

inline ActionEvent event_from_json(const json& j) {
  ActionEvent e;
  e.agent_id = detail::req<std::string>(j, "agent_id");
  e.step = detail::req<int>(j, "step");
  e.action = detail::req_action(j, "action");
  if (j.contains("payload_text") && !j["payload_text"].is_null()) e.payload_text = j["payload_text"].get<std::string>();
  e.stance = detail::opt_stance(j);
  return e;
}

inline CascadeGraph cascade_from_json(const json& j) {
  CascadeGraph g;
  g.news_id = detail::req<std::string>(j, "news_id");
  for (const auto& n : detail::req<std::vector<std::string>>(j, "nodes")) g.nodes.insert(n);
  g.seeds = detail::req<std::vector<std::string>>(j, "seeds");
  for (const auto& e : j.value("edges", json::array()))
    g.edges.push_back({detail::req<std::string>(e, "source"), detail::req<std::string>(e, "target"),
                       detail::req<int>(e, "step"), detail::req_action(e, "action")});
  for (const auto& e : j.value("events", json::array())) g.events.push_back(event_from_json(e));
  return g;
}

// ---- line-oriented IO ----------------------------------------------------

// Calls fn(json, line_number) for every non-blank line. Parse and field
// errors are rethrown as ParseError carrying the line number.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    try {
      fn(j, lineno);
    } catch (const IntegrityError&) {
      throw;
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

inline std::vector<NewsItem> load_news(const std::filesystem::path& path, const TruncationCaps& caps = {}) {
  std::vector<NewsItem> out;
  std::unordered_set<std::string> ids;
  for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
    auto n = news_from_json(j, caps);
    if (!ids.insert(n.id).second)
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": duplicate news id " + n.id);
    out.push_back(std::move(n));
  });
  return out;
}

inline std::vector<UserRecord> load_users(const std::filesystem::path& path) {
  std::vector<UserRecord> out;
  std::unordered_set<std::string> ids;
  for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
    auto u = user_from_json(j);
    if (!ids.insert(u.id).second)
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": duplicate user id " + u.id);
    out.push_back(std::move(u));
  });
  return out;
}

inline std::vector<Comment> load_comments(const std::filesystem::path& path) {
  std::vector<Comment> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) { out.push_back(comment_from_json(j)); });
  return out;
}

inline void save_cascades(const std::filesystem::path& path, const std::vector<CascadeGraph>& gs) {
  std::vector<json> rows;
  for (const auto& g : gs) {
    g.validate();
    rows.push_back(to_json(g));
  }
  write_jsonl(path, rows);
}

inline void save_cascade(const CascadeGraph& g, const std::filesystem::path& path) { save_cascades(path, {g}); }

inline std::vector<CascadeGraph> load_cascades(const std::filesystem::path& path) {
  std::vector<CascadeGraph> out;
  for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
    if (j.contains("kind") && j["kind"] != "cascade") return;  // run files carry other record kinds
    auto g = cascade_from_json(j.contains("cascade") ? j["cascade"] : j);
    try {
      g.validate();
    } catch (const IntegrityError& e) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(g));
  });
  return out;
}

inline CascadeGraph load_cascade(const std::filesystem::path& path) {
  auto gs = load_cascades(path);
  if (gs.size() != 1) throw InputError(path.string() + ": expected exactly one cascade");
  return gs.front();
}

// ---- corpus --------------------------------------------------------------

// Symmetric follow graph: u~v iff either lists the other. Neighbour lists are
// sorted and exclude self-loops.
inline std::map<std::string, std::vector<std::string>> symmetric_follow_graph(const std::vector<UserRecord>& users) {
  std::map<std::string, std::set<std::string>> adj;
  for (const auto& u : users) adj[u.id];
  for (const auto& u : users)
    for (const auto& v : u.neighbors) {
      if (v == u.id) continue;
      if (!adj.count(v)) throw IntegrityError("user " + u.id + " lists unknown neighbor " + v);
      adj[u.id].insert(v);
      adj[v].insert(u.id);
    }
  std::map<std::string, std::vector<std::string>> out;
  for (auto& [k, s] : adj) out[k] = std::vector<std::string>(s.begin(), s.end());
  return out;
}

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<NewsItem> news, std::vector<Comment> comments, std::vector<UserRecord> users)
      : news_(std::move(news)), comments_(std::move(comments)), users_(std::move(users)) {
    reindex();
    check_integrity();
  }

  const std::vector<NewsItem>& news() const { return news_; }
  const std::vector<Comment>& comments() const { return comments_; }
  const std::vector<UserRecord>& users() const { return users_; }

  const NewsItem* find_news(const std::string& id) const {
    auto it = news_index_.find(id);
    return it == news_index_.end() ? nullptr : &news_[it->second];
  }
  const UserRecord* find_user(const std::string& id) const {
    auto it = user_index_.find(id);
    return it == user_index_.end() ? nullptr : &users_[it->second];
  }

  std::vector<const NewsItem*> split(Split s) const {
    std::vector<const NewsItem*> out;
    for (const auto& n : news_)
      if (n.split == s) out.push_back(&n);
    return out;
  }

  std::map<std::string, std::vector<std::string>> follow_graph() const { return symmetric_follow_graph(users_); }

 private:
  void reindex() {
    news_index_.clear();
    user_index_.clear();
    for (std::size_t i = 0; i < news_.size(); ++i)
      if (!news_index_.emplace(news_[i].id, i).second) throw IntegrityError("duplicate news id " + news_[i].id);
    for (std::size_t i = 0; i < users_.size(); ++i)
      if (!user_index_.emplace(users_[i].id, i).second) throw IntegrityError("duplicate user id " + users_[i].id);
  }

  void check_integrity() const {
    std::unordered_set<std::string> comment_ids;
    for (std::size_t i = 0; i < comments_.size(); ++i) {
      const auto& c = comments_[i];
      const std::string row = "comment row " + std::to_string(i + 1) + " (" + c.id + ")";
      if (!comment_ids.insert(c.id).second) throw IntegrityError(row + ": duplicate comment id");
      if (!news_index_.count(c.news_id)) throw IntegrityError(row + ": unknown news_id " + c.news_id);
      if (!user_index_.count(c.user_id)) throw IntegrityError(row + ": unknown user_id " + c.user_id);
    }
    for (std::size_t i = 0; i < users_.size(); ++i)
      for (const auto& v : users_[i].neighbors)
        if (!user_index_.count(v))
          throw IntegrityError("user row " + std::to_string(i + 1) + " (" + users_[i].id + "): unknown neighbor " + v);
  }

  std::vector<NewsItem> news_;
  std::vector<Comment> comments_;
  std::vector<UserRecord> users_;
  std::unordered_map<std::string, std::size_t> news_index_;
  std::unordered_map<std::string, std::size_t> user_index_;
};

// Loads news.jsonl (required) plus comments.jsonl and users.jsonl (optional,
// missing means empty) from a directory and applies referential checks.
inline Corpus load_corpus(const std::filesystem::path& dir, const TruncationCaps& caps = {}) {
  auto news = load_news(dir / "news.jsonl", caps);
  std::vector<Comment> comments;
  std::vector<UserRecord> users;
  if (std::filesystem::exists(dir / "users.jsonl")) users = load_users(dir / "users.jsonl");
  if (std::filesystem::exists(dir / "comments.jsonl")) comments = load_comments(dir / "comments.jsonl");
  return Corpus(std::move(news), std::move(comments), std::move(users));
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<json> rows;
  for (const auto& n : c.news()) rows.push_back(to_json(n));
  write_jsonl(dir / "news.jsonl", rows);
  rows.clear();
  for (const auto& x : c.comments()) rows.push_back(to_json(x));
  write_jsonl(dir / "comments.jsonl", rows);
  rows.clear();
  for (const auto& u : c.users()) rows.push_back(to_json(u));
  write_jsonl(dir / "users.jsonl", rows);
}

// ---- influence ------------------------------------------------------------

// Population mean / standard deviation of (repost_count, avg_likes, follower_count).
struct InfluenceStats {
  double mean[3] = {0, 0, 0};
  double stddev[3] = {0, 0, 0};
};

inline void influence_features(const UserRecord& u, double out[3]) {
  out[0] = static_cast<double>(u.repost_count);
  out[1] = u.avg_likes;
  out[2] = static_cast<double>(u.follower_count);
}

inline InfluenceStats compute_influence_stats(const std::vector<UserRecord>& users) {
  InfluenceStats s;
  if (users.empty()) return s;
  const double n = static_cast<double>(users.size());
  double f[3];
  for (const auto& u : users) {
    influence_features(u, f);
    for (int k = 0; k < 3; ++k) s.mean[k] += f[k];
  }
  for (int k = 0; k < 3; ++k) s.mean[k] /= n;
  for (const auto& u : users) {
    influence_features(u, f);
    for (int k = 0; k < 3; ++k) s.stddev[k] += (f[k] - s.mean[k]) * (f[k] - s.mean[k]);
  }
  for (int k = 0; k < 3; ++k) s.stddev[k] = std::sqrt(s.stddev[k] / n);
  return s;
}

// Unweighted mean of the three z-scores; a zero-variance feature contributes 0.
inline double influence_score(const UserRecord& u, const InfluenceStats& stats) {
  double f[3];
  influence_features(u, f);
  double sum = 0.0;
  for (int k = 0; k < 3; ++k)
    if (stats.stddev[k] > 0.0) sum += (f[k] - stats.mean[k]) / stats.stddev[k];
  return sum / 3.0;
}

// Number of users in the influential set for a given fraction (rounded, at
// least one when the fraction is positive and users exist).
inline std::size_t influential_count(std::size_t n_users, double fraction) {
  if (n_users == 0 || fraction <= 0.0) return 0;
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_users)));
  return std::clamp<std::size_t>(k, 1, n_users);
}

// Ids of the top `fraction` of users by influence score: descending score,
// ties by ascending id.
inline std::vector<std::string> top_influential(const std::vector<UserRecord>& users, double fraction = 0.05) {
  const auto stats = compute_influence_stats(users);
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& u : users) scored.emplace_back(influence_score(u, stats), u.id);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  const auto k = influential_count(users.size(), fraction);
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

}  // namespace avoid
