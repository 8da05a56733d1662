#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "avoid/backend.hpp"
#include "avoid/embed.hpp"
#include "avoid/persona.hpp"

namespace avoid {

// Timestamps are integer simulation steps.
struct MemoryRecord {
  std::string text;
  Embedding embedding;
  std::int64_t timestamp = 0;
  std::string source_agent;
  std::string news_id;
  bool warning = false;

  friend bool operator==(const MemoryRecord&, const MemoryRecord&) = default;
};

struct ScoredRecord {
  const MemoryRecord* record;
  double similarity;
};

class ShortTermMemory {
 public:
  explicit ShortTermMemory(std::size_t capacity = 20) : capacity_(capacity) {
    if (capacity_ == 0) throw ConfigError("short-term memory capacity must be positive");
  }

  // Appends; evicts oldest-first once over capacity.
  void observe(MemoryRecord r) {
    records_.push_back(std::move(r));
    while (records_.size() > capacity_) records_.pop_front();
  }

  // Top-k by cosine; equal similarities prefer the more recent record.
  std::vector<ScoredRecord> retrieve(const Embedding& query, std::size_t k) const {
    if (records_.empty() || k == 0) return {};
    KnnIndex index;
    for (std::size_t i = records_.size(); i-- > 0;) index.add(std::to_string(i), records_[i].embedding);
    std::vector<ScoredRecord> out;
    for (const auto& hit : index.query(query, k)) out.push_back({&records_[std::stoul(hit.id)], hit.similarity});
    return out;
  }

  std::vector<ScoredRecord> retrieve(const EmbeddingProvider& provider, std::string_view query, std::size_t k) const {
    if (records_.empty()) return {};
    return retrieve(provider.embed(query), k);
  }

  bool has_warning_for(const std::string& news_id) const {
    return std::any_of(records_.begin(), records_.end(),
                       [&](const MemoryRecord& r) { return r.warning && r.news_id == news_id; });
  }

  const std::deque<MemoryRecord>& records() const { return records_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

 private:
  std::size_t capacity_;
  std::deque<MemoryRecord> records_;
};

struct LtmEntry {
  std::string summary;
  Embedding embedding;
  std::int64_t created_at = 0;

  friend bool operator==(const LtmEntry&, const LtmEntry&) = default;
};

struct LtmHit {
  std::size_t index;
  std::string summary;
  double similarity;
  double weight;
  double score;
};

class LongTermMemory {
 public:
  LongTermMemory(double decay = 0.05, double forget_threshold = 0.05) : decay_(decay), epsilon_(forget_threshold) {
    if (decay_ < 0.0) throw ConfigError("decay rate must be non-negative");
  }

  double weight(const LtmEntry& e, std::int64_t now) const {
    return std::exp(-decay_ * static_cast<double>(now - e.created_at));
  }

  void add(LtmEntry e) { entries_.push_back(std::move(e)); }

  // Drops entries whose decayed weight fell below the forget threshold.
  void prune(std::int64_t now) {
    std::erase_if(entries_, [&](const LtmEntry& e) { return weight(e, now) < epsilon_; });
  }

  const std::vector<LtmEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  double decay() const { return decay_; }
  double forget_threshold() const { return epsilon_; }

 private:
  double decay_;
  double epsilon_;
  std::vector<LtmEntry> entries_;
};

struct ConsolidationResult {
  bool consolidated = false;
  std::optional<std::string> error;
};

// Summarises the short-term records into one long-term entry whose embedding
// is the normalised centroid of the record embeddings, then prunes. On
// backend failure nothing changes.
inline ConsolidationResult ltm_consolidate(const ShortTermMemory& stm, LongTermMemory& ltm, DecisionClient& client,
                                           std::int64_t now) {
  if (stm.empty()) return {};
  std::vector<std::string> digests;
  std::vector<Embedding> es;
  for (const auto& r : stm.records()) {
    digests.push_back(text::head_tokens(r.text, 8));
    es.push_back(r.embedding);
  }
  DecisionResponse resp;
  try {
    resp = client.dispatch(make_request(PromptKind::Consolidate, {{"records", text::join(digests, "; ")}}));
  } catch (const std::exception& e) {
    return {false, std::string(e.what())};
  }
  auto centroid = vec::mean(es);
  if (!vec::normalize(centroid)) centroid = es.back().values;
  ltm.add({resp.text, Embedding(std::move(centroid)), now});
  ltm.prune(now);
  return {true, std::nullopt};
}

struct Decomposition {
  std::string entity;
  std::string event;
  std::string topic;
};

inline Decomposition parse_decomposition(const std::string& reply) {
  Decomposition d;
  std::istringstream in(reply);
  for (std::string line; std::getline(in, line);) {
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    auto key = text::lower(text::trim(line.substr(0, colon)));
    auto val = text::trim(line.substr(colon + 1));
    if (key == "entity") d.entity = val;
    else if (key == "event") d.event = val;
    else if (key == "topic") d.topic = val;
  }
  return d;
}

// Decomposes the news into entity / event / topic sub-queries, takes the top-1
// entry for each, and returns the deduplicated union ordered by
// similarity * decayed weight (ties by entry order).
inline std::vector<LtmHit> ltm_retrieve(const LongTermMemory& ltm, const std::string& news_text,
                                        DecisionClient& client, const EmbeddingProvider& provider, std::int64_t now) {
  if (ltm.empty()) return {};
  auto resp = client.dispatch(make_request(PromptKind::Decompose, {{"news", news_text}}));
  auto d = parse_decomposition(resp.text);
  KnnIndex index;
  for (std::size_t i = 0; i < ltm.entries().size(); ++i) index.add(std::to_string(i), ltm.entries()[i].embedding);
  std::map<std::size_t, double> best_sim;
  for (const auto* q : {&d.entity, &d.event, &d.topic}) {
    if (text::normalize_ws(*q).empty()) continue;
    auto hits = index.query(provider.embed(*q), 1);
    auto i = std::stoul(hits.front().id);
    auto [it, inserted] = best_sim.emplace(i, hits.front().similarity);
    if (!inserted) it->second = std::max(it->second, hits.front().similarity);
  }
  std::vector<LtmHit> out;
  for (auto [i, sim] : best_sim) {
    const auto& e = ltm.entries()[i];
    double w = ltm.weight(e, now);
    out.push_back({i, e.summary, sim, w, sim * w});
  }
  std::stable_sort(out.begin(), out.end(), [](const LtmHit& a, const LtmHit& b) { return a.score > b.score; });
  return out;
}

// ---- policy memory -----------------------------------------------------------

enum class PolicyLevel { Entity, Event, Meta };

inline const char* to_string(PolicyLevel l) {
  switch (l) {
    case PolicyLevel::Entity: return "entity";
    case PolicyLevel::Event: return "event";
    case PolicyLevel::Meta: return "meta";
  }
  return "?";
}

inline std::optional<PolicyLevel> parse_policy_level(std::string_view s) {
  if (s == "entity") return PolicyLevel::Entity;
  if (s == "event") return PolicyLevel::Event;
  if (s == "meta") return PolicyLevel::Meta;
  return std::nullopt;
}

struct PolicyEntry {
  std::string key;
  std::string guidance;
  Embedding embedding;
  std::int64_t step = 0;

  friend bool operator==(const PolicyEntry&, const PolicyEntry&) = default;
};

inline std::string normalize_key(std::string_view s) { return text::join(text::words(s), " "); }

class PolicyMemory {
 public:
  // Replaces the entry with the same normalised key, else appends.
  void upsert(PolicyLevel level, PolicyEntry e) {
    e.key = normalize_key(e.key);
    auto& store = level_store(level);
    for (auto& x : store)
      if (x.key == e.key) {
        x = std::move(e);
        return;
      }
    store.push_back(std::move(e));
  }

  const PolicyEntry* find(PolicyLevel level, std::string_view key) const {
    const auto k = normalize_key(key);
    for (const auto& x : level_store(level))
      if (x.key == k) return &x;
    return nullptr;
  }

  const std::vector<PolicyEntry>& level(PolicyLevel l) const { return level_store(l); }
  std::size_t size() const { return entity_.size() + event_.size() + meta_.size(); }

  std::string digest() const {
    std::vector<std::string> parts;
    for (auto l : {PolicyLevel::Entity, PolicyLevel::Event, PolicyLevel::Meta})
      for (const auto& e : level(l)) parts.push_back(std::string(to_string(l)) + ":" + e.key + "=" + e.guidance);
    return parts.empty() ? "(none)" : text::join(parts, "; ");
  }

  friend bool operator==(const PolicyMemory&, const PolicyMemory&) = default;

 private:
  std::vector<PolicyEntry>& level_store(PolicyLevel l) {
    return l == PolicyLevel::Entity ? entity_ : l == PolicyLevel::Event ? event_ : meta_;
  }
  const std::vector<PolicyEntry>& level_store(PolicyLevel l) const {
    return l == PolicyLevel::Entity ? entity_ : l == PolicyLevel::Event ? event_ : meta_;
  }

  std::vector<PolicyEntry> entity_, event_, meta_;
};

// Key of the first capitalised token (fallback: first token), normalised.
inline std::string primary_entity(const std::string& news_text) {
  auto raw = text::raw_words(news_text);
  for (const auto& w : raw)
    if (std::isupper(static_cast<unsigned char>(w[0]))) return normalize_key(w);
  return raw.empty() ? std::string{} : normalize_key(raw.front());
}

struct ReflectionInput {
  std::string news_text;
  int judgment = 0;      // 1 = fake
  int ground_truth = 0;  // only available in calibration on the train split
  std::string social_context;
  std::string trace;
  std::int64_t step = 0;
};

struct ReflectionResult {
  bool updated = false;
  std::optional<std::string> error;
};

inline const char* label_name(int label) { return label == 1 ? "fake" : "real"; }

// Identity when the judgment was right. Otherwise the backend proposes
// level|key|guidance lines which are upserted; parse or transport failure
// leaves the policy untouched.
inline ReflectionResult policy_reflect(const ReflectionInput& in, PolicyMemory& policy, DecisionClient& client,
                                       const EmbeddingProvider& provider) {
  if (in.judgment == in.ground_truth) return {};
  std::vector<std::pair<PolicyLevel, PolicyEntry>> revisions;
  try {
    auto resp = client.dispatch(make_request(PromptKind::PolicyReflect,
                                             {{"news", in.news_text},
                                              {"policy", policy.digest()},
                                              {"context", in.social_context.empty() ? "(none)" : in.social_context},
                                              {"judgment", label_name(in.judgment)},
                                              {"trace", in.trace.empty() ? "(none)" : in.trace},
                                              {"ground_truth", label_name(in.ground_truth)},
                                              {"entity_key", primary_entity(in.news_text)}}));
    std::istringstream is(resp.text);
    for (std::string line; std::getline(is, line);) {
      auto a = line.find('|');
      auto b = a == std::string::npos ? a : line.find('|', a + 1);
      if (b == std::string::npos) continue;
      auto level = parse_policy_level(text::lower(text::trim(line.substr(0, a))));
      if (!level) continue;
      PolicyEntry e;
      e.key = text::trim(line.substr(a + 1, b - a - 1));
      e.guidance = text::trim(line.substr(b + 1));
      if (e.key.empty() || e.guidance.empty()) continue;
      e.embedding = provider.embed(e.guidance);
      e.step = in.step;
      revisions.emplace_back(*level, std::move(e));
    }
  } catch (const std::exception& e) {
    return {false, std::string(e.what())};
  }
  for (auto& [l, e] : revisions) policy.upsert(l, std::move(e));
  return {!revisions.empty(), std::nullopt};
}

// ---- agents ------------------------------------------------------------------

struct MemoryConfig {
  std::size_t stm_capacity = 20;
  double decay = 0.05;
  double forget_threshold = 0.05;
};

struct Agent {
  std::string id;
  Role role = Role::Diffuser;
  PersonaProfile persona;
  Embedding persona_embedding;
  std::int64_t follower_count = 0;
  double avg_likes = 0.0;
  std::int64_t repost_count = 0;
  ShortTermMemory stm;
  LongTermMemory ltm;
  std::optional<PolicyMemory> policy;
  bool stm_dirty = false;  // records added since the last consolidation

  Agent(std::string agent_id, Role r, PersonaProfile p, Embedding pe, const MemoryConfig& mc)
      : id(std::move(agent_id)),
        role(r),
        persona(std::move(p)),
        persona_embedding(std::move(pe)),
        stm(mc.stm_capacity),
        ltm(mc.decay, mc.forget_threshold) {
    if (role == Role::Verifier) policy.emplace();
  }
};

// ---- snapshots ---------------------------------------------------------------

inline json to_json(const MemoryRecord& r) {
  return json{{"text", r.text},     {"embedding", r.embedding.values}, {"timestamp", r.timestamp},
              {"source", r.source_agent}, {"news_id", r.news_id}, {"warning", r.warning}};
}

inline MemoryRecord record_from_json(const json& j) {
  return MemoryRecord{j.at("text").get<std::string>(), Embedding(j.at("embedding").get<std::vector<double>>()),
                      j.at("timestamp").get<std::int64_t>(), j.at("source").get<std::string>(),
                      j.at("news_id").get<std::string>(), j.at("warning").get<bool>()};
}

inline json memory_snapshot(const Agent& a) {
  json stm = json::array();
  for (const auto& r : a.stm.records()) stm.push_back(to_json(r));
  json ltm = json::array();
  for (const auto& e : a.ltm.entries())
    ltm.push_back({{"summary", e.summary}, {"embedding", e.embedding.values}, {"created_at", e.created_at}});
  json j{{"stm", stm}, {"ltm", ltm}, {"stm_dirty", a.stm_dirty}};
  if (a.policy) {
    json pol = json::object();
    for (auto l : {PolicyLevel::Entity, PolicyLevel::Event, PolicyLevel::Meta}) {
      json arr = json::array();
      for (const auto& e : a.policy->level(l))
        arr.push_back({{"key", e.key}, {"guidance", e.guidance}, {"embedding", e.embedding.values}, {"step", e.step}});
      pol[to_string(l)] = arr;
    }
    j["policy"] = pol;
  }
  return j;
}

inline void restore_memory(Agent& a, const json& j) {
  a.stm = ShortTermMemory(a.stm.capacity());
  for (const auto& r : j.at("stm")) a.stm.observe(record_from_json(r));
  a.ltm = LongTermMemory(a.ltm.decay(), a.ltm.forget_threshold());
  for (const auto& e : j.at("ltm"))
    a.ltm.add({e.at("summary").get<std::string>(), Embedding(e.at("embedding").get<std::vector<double>>()),
               e.at("created_at").get<std::int64_t>()});
  a.stm_dirty = j.value("stm_dirty", false);
  if (j.contains("policy")) {
    a.policy.emplace();
    for (auto l : {PolicyLevel::Entity, PolicyLevel::Event, PolicyLevel::Meta})
      for (const auto& e : j["policy"].at(to_string(l)))
        a.policy->upsert(l, {e.at("key").get<std::string>(), e.at("guidance").get<std::string>(),
                             Embedding(e.at("embedding").get<std::vector<double>>()), e.at("step").get<std::int64_t>()});
  }
}

}  // namespace avoid
