#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "avoid/agent.hpp"
#include "avoid/backend.hpp"
#include "avoid/corpus.hpp"
#include "avoid/embed.hpp"
#include "avoid/persona.hpp"
#include "avoid/random.hpp"

namespace avoid {

struct SimulationConfig {
  std::size_t seed_count = 1;
  int max_depth = 4;
  int max_steps = 0;  // 0: bounded by max_depth only
  std::uint64_t rng_seed = 42;
  double verifier_fraction = 0.05;
  int consolidation_period = 10;
  std::size_t stm_top = 3;
  MemoryConfig memory{};
  bool global_warnings = false;  // warn reaches every agent instead of graph neighbours
  bool calibrate = false;        // verifier policy reflection on labelled train items
  bool keep_transcript = false;
  std::vector<std::string> verifier_keywords{"hoax", "miracle", "shocking", "conspiracy", "secret", "exposed",
                                             "cure", "banned", "leaked", "unbelievable"};

  int depth_limit() const { return max_steps > 0 ? std::min(max_depth, max_steps) : max_depth; }

  void validate() const {
    if (seed_count < 1) throw ConfigError("seed_count must be >= 1");
    if (max_depth < 1) throw ConfigError("max_depth must be >= 1");
    if (consolidation_period < 1) throw ConfigError("consolidation_period must be >= 1");
    if (verifier_fraction < 0.0 || verifier_fraction > 1.0) throw ConfigError("verifier_fraction outside [0,1]");
  }
};

inline json to_json(const SimulationConfig& c) {
  return json{{"seed_count", c.seed_count},
              {"max_depth", c.max_depth},
              {"max_steps", c.max_steps},
              {"rng_seed", c.rng_seed},
              {"verifier_fraction", c.verifier_fraction},
              {"consolidation_period", c.consolidation_period},
              {"stm_top", c.stm_top},
              {"stm_capacity", c.memory.stm_capacity},
              {"decay", c.memory.decay},
              {"forget_threshold", c.memory.forget_threshold},
              {"global_warnings", c.global_warnings},
              {"calibrate", c.calibrate},
              {"verifier_keywords", c.verifier_keywords}};
}

inline SimulationConfig simulation_config_from_json(const json& j) {
  SimulationConfig c;
  c.seed_count = j.value("seed_count", c.seed_count);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.verifier_fraction = j.value("verifier_fraction", c.verifier_fraction);
  c.consolidation_period = j.value("consolidation_period", c.consolidation_period);
  c.stm_top = j.value("stm_top", c.stm_top);
  c.memory.stm_capacity = j.value("stm_capacity", c.memory.stm_capacity);
  c.memory.decay = j.value("decay", c.memory.decay);
  c.memory.forget_threshold = j.value("forget_threshold", c.memory.forget_threshold);
  c.global_warnings = j.value("global_warnings", c.global_warnings);
  c.calibrate = j.value("calibrate", c.calibrate);
  c.verifier_keywords = j.value("verifier_keywords", c.verifier_keywords);
  return c;
}

// Agents sorted by id with a symmetric adjacency over agent indices.
struct Environment {
  std::vector<Agent> agents;
  std::vector<std::vector<std::size_t>> adjacency;
  std::map<std::string, std::size_t> index;
  std::vector<Rng> agent_rngs;
  Rng run_rng;
  std::int64_t clock = 0;
  const EmbeddingProvider* provider = nullptr;

  const Agent& agent(const std::string& id) const { return agents.at(index.at(id)); }
  Agent& agent(const std::string& id) { return agents.at(index.at(id)); }
};

// Builds the roster: verifiers are the top `verifier_fraction` users by
// influence, every agent draws a persona from the seeded roster stream
// (verifiers from the verifier pool when it is non-empty), memories start empty.
inline Environment init_environment(const std::vector<UserRecord>& users, const PersonaPool& pool,
                                    const EmbeddingProvider& provider, const SimulationConfig& cfg) {
  cfg.validate();
  if (pool.diffusers.empty() && pool.verifiers.empty()) throw ConfigError("persona pool is empty");
  if (users.empty()) throw ConfigError("no users to instantiate agents from");
  Environment env;
  env.provider = &provider;
  env.run_rng = Rng::derive(cfg.rng_seed, "run");
  auto graph = symmetric_follow_graph(users);
  auto top = top_influential(users, cfg.verifier_fraction);
  std::set<std::string> verifiers(top.begin(), top.end());

  std::vector<const UserRecord*> sorted;
  for (const auto& u : users) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });

  Rng roster = Rng::derive(cfg.rng_seed, "roster");
  std::map<std::string, Embedding> persona_cache;
  for (const auto* u : sorted) {
    Role role = verifiers.count(u->id) ? Role::Verifier : Role::Diffuser;
    const auto& source = (role == Role::Verifier && !pool.verifiers.empty()) || pool.diffusers.empty()
                             ? pool.verifiers
                             : pool.diffusers;
    PersonaProfile p = source[static_cast<std::size_t>(roster.below(source.size()))];
    auto it = persona_cache.find(p.profile_text);
    if (it == persona_cache.end()) it = persona_cache.emplace(p.profile_text, provider.embed(p.profile_text)).first;
    Agent a(u->id, role, std::move(p), it->second, cfg.memory);
    a.follower_count = u->follower_count;
    a.avg_likes = u->avg_likes;
    a.repost_count = u->repost_count;
    env.index[u->id] = env.agents.size();
    env.agents.push_back(std::move(a));
    env.agent_rngs.push_back(Rng::derive(cfg.rng_seed, "agent:" + u->id));
  }
  env.adjacency.resize(env.agents.size());
  for (const auto& [id, nbrs] : graph)
    for (const auto& v : nbrs) env.adjacency[env.index.at(id)].push_back(env.index.at(v));
  return env;
}

struct DecisionLogEntry {
  std::string news_id;
  std::string agent_id;
  int step = 0;
  Action action = Action::View;
  std::size_t stm_hits = 0;
  std::size_t ltm_hits = 0;
  bool warning_present = false;
  bool coerced = false;
};

inline json to_json(const DecisionLogEntry& d) {
  return json{{"news_id", d.news_id},   {"agent_id", d.agent_id}, {"step", d.step},
              {"action", to_string(d.action)}, {"stm_hits", d.stm_hits}, {"ltm_hits", d.ltm_hits},
              {"warning_present", d.warning_present}, {"coerced", d.coerced}};
}

inline DecisionLogEntry decision_from_json(const json& j) {
  DecisionLogEntry d;
  d.news_id = j.at("news_id").get<std::string>();
  d.agent_id = j.at("agent_id").get<std::string>();
  d.step = j.at("step").get<int>();
  d.action = detail::req_action(j, "action");
  d.stm_hits = j.at("stm_hits").get<std::size_t>();
  d.ltm_hits = j.at("ltm_hits").get<std::size_t>();
  d.warning_present = j.at("warning_present").get<bool>();
  d.coerced = j.at("coerced").get<bool>();
  return d;
}

struct CascadeOutcome {
  CascadeGraph graph;
  bool aborted = false;
  std::string error;
};

namespace detail {

inline void consolidate_due(Environment& env, DecisionClient& client, const SimulationConfig& cfg) {
  if (env.clock % cfg.consolidation_period != 0) return;
  for (auto& a : env.agents) {
    if (!a.stm_dirty) continue;
    if (ltm_consolidate(a.stm, a.ltm, client, env.clock).consolidated) a.stm_dirty = false;
  }
}

inline void tick(Environment& env, DecisionClient& client, const SimulationConfig& cfg) {
  ++env.clock;
  consolidate_due(env, client, cfg);
}

}  // namespace detail

/// Runs one cascade. Seeds post at step 0; each later step first collects
/// every exposed agent's decision (ascending id) and then applies the
/// effects serially in the same order. Non-view reactions make the agent a
/// node with an edge from each exposer; forward exposes unacted neighbours
/// at the next step; warn drops a warning record into neighbours' short-term
/// memory. Expansion stops at the depth limit or when the frontier empties.
inline CascadeOutcome run_cascade(Environment& env, const NewsItem& news, const SimulationConfig& cfg,
                                  DecisionClient& client, std::vector<DecisionLogEntry>* log = nullptr) {
  cfg.validate();
  if (env.agents.empty() || env.provider == nullptr) throw ConfigError("environment not initialised");
  if (cfg.seed_count > env.agents.size()) throw ConfigError("seed_count exceeds agent count");
  const auto& provider = *env.provider;
  const Embedding news_emb = provider.embed(news.text);
  const std::string head = text::head_tokens(text::normalize_ws(news.text), 30);
  const int depth = cfg.depth_limit();

  CascadeOutcome out;
  auto& g = out.graph;
  g.news_id = news.id;

  std::vector<std::size_t> pool(env.agents.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < cfg.seed_count; ++i) {
    auto j = i + static_cast<std::size_t>(env.run_rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  std::vector<bool> acted(env.agents.size(), false);
  std::map<std::size_t, std::vector<std::size_t>> frontier;
  for (std::size_t i = 0; i < cfg.seed_count; ++i) {
    auto s = pool[i];
    auto& a = env.agents[s];
    acted[s] = true;
    g.seeds.push_back(a.id);
    g.nodes.insert(a.id);
    g.events.push_back({a.id, 0, Action::Forward, std::nullopt, std::nullopt});
    std::string t = "posted: " + head;
    a.stm.observe({t, provider.embed(t), env.clock, a.id, news.id, false});
    a.stm_dirty = true;
  }
  for (std::size_t i = 0; i < cfg.seed_count; ++i)
    for (auto v : env.adjacency[pool[i]])
      if (!acted[v]) frontier[v].push_back(pool[i]);
  detail::tick(env, client, cfg);

  const auto entity = primary_entity(news.text);
  const auto news_words = text::words(news.text);
  const bool keyword_hit = std::any_of(news_words.begin(), news_words.end(), [&](const std::string& w) {
    return std::find(cfg.verifier_keywords.begin(), cfg.verifier_keywords.end(), w) != cfg.verifier_keywords.end();
  });

  for (int step = 1; step <= depth && !frontier.empty(); ++step) {
    struct Pending {
      std::size_t agent;
      const std::vector<std::size_t>* exposers;
      DecisionResponse resp;
      DecisionLogEntry entry;
    };
    std::vector<Pending> pending;
    for (const auto& [idx, exposers] : frontier) acted[idx] = true;

    try {
      for (const auto& [idx, exposers] : frontier) {
        auto& a = env.agents[idx];
        DecisionSignals sig;
        sig.persona_news_cosine = cosine(a.persona_embedding, news_emb);
        auto stm_hits = a.stm.retrieve(news_emb, cfg.stm_top);
        if (!stm_hits.empty()) {
          double s = 0.0;
          for (const auto& h : stm_hits) s += h.similarity;
          sig.memory_coherence = s / static_cast<double>(stm_hits.size());
        }
        auto ltm_hits = ltm_retrieve(a.ltm, news.text, client, provider, env.clock);
        sig.warning_present = a.stm.has_warning_for(news.id);
        sig.jitter = env.agent_rngs[idx].uniform();

        std::vector<std::string> stm_txt, ltm_txt;
        for (const auto& h : stm_hits) stm_txt.push_back(h.record->text);
        for (const auto& h : ltm_hits) ltm_txt.push_back(h.summary);
        DecisionRequest req;
        if (a.role == Role::Verifier) {
          sig.keyword_hit = keyword_hit;
          std::string policy_digest = "(none)";
          if (a.policy) {
            if (const auto* rule = a.policy->find(PolicyLevel::Entity, entity)) {
              sig.policy_hit = rule->guidance == "misjudged: fake";
              if (rule->guidance == "misjudged: real") sig.keyword_hit = false;
            }
            policy_digest = a.policy->digest();
          }
          req = make_request(PromptKind::VerifierAction,
                             {{"persona", a.persona.profile_text},
                              {"policies", policy_digest},
                              {"fact_check", keyword_hit ? "claim matches known misinformation patterns"
                                                         : "no matching fact-check found"},
                              {"news", news.text}},
                             verifier_actions(), sig);
        } else {
          req = make_request(PromptKind::DiffuserAction,
                             {{"persona", a.persona.profile_text},
                              {"news", news.text},
                              {"news_head", head},
                              {"stm", stm_txt.empty() ? "(empty)" : text::join(stm_txt, " | ")},
                              {"ltm", ltm_txt.empty() ? "(empty)" : text::join(ltm_txt, " | ")}},
                             diffuser_actions(), sig);
        }
        req.context_digest = a.id + "@" + std::to_string(step);
        Pending p{idx, &exposers, client.dispatch(req), {}};
        p.entry = {news.id, a.id, step, *p.resp.action, stm_hits.size(), ltm_hits.size(), sig.warning_present,
                   p.resp.coerced};
        pending.push_back(std::move(p));
      }
    } catch (const TransportError& e) {
      out.aborted = true;
      out.error = e.what();
      return out;
    }

    std::map<std::size_t, std::vector<std::size_t>> next;
    for (auto& p : pending) {
      auto& a = env.agents[p.agent];
      const Action act = *p.resp.action;
      if (log) log->push_back(p.entry);
      for (auto e : *p.exposers) {
        std::string t = env.agents[e].id + " forwarded: " + head;
        a.stm.observe({t, provider.embed(t), env.clock, env.agents[e].id, news.id, false});
      }
      a.stm_dirty = true;
      if (a.role == Role::Verifier) g.events.push_back({a.id, step, Action::FactCheck, std::nullopt, std::nullopt});
      std::optional<std::string> payload;
      if (act == Action::Comment) {
        auto text = p.resp.text;
        auto nl = text.rfind('\n');
        payload = text::trim(nl == std::string::npos ? text : text.substr(0, nl));
      }
      g.events.push_back({a.id, step, act, payload, act == Action::Comment ? p.resp.stance : std::nullopt});
      if (act != Action::View) {
        g.nodes.insert(a.id);
        for (auto e : *p.exposers) g.edges.push_back({env.agents[e].id, a.id, step, act});
      }
      if (act == Action::Forward && step < depth)
        for (auto v : env.adjacency[p.agent])
          if (!acted[v]) next[v].push_back(p.agent);
      if (act == Action::Warn) {
        std::string t = "WARNING from " + a.id + ": this news might be fake: " + head;
        Embedding we = provider.embed(t);
        auto warn = [&](std::size_t v) {
          if (v == p.agent) return;
          env.agents[v].stm.observe({t, we, env.clock, a.id, news.id, true});
          env.agents[v].stm_dirty = true;
        };
        if (cfg.global_warnings)
          for (std::size_t v = 0; v < env.agents.size(); ++v) warn(v);
        else
          for (auto v : env.adjacency[p.agent]) warn(v);
      }
      if (cfg.calibrate && a.policy && news.label && news.split == Split::Train) {
        ReflectionInput in{news.text, act == Action::Warn ? 1 : 0, *news.label, "exposed by " + std::to_string(p.exposers->size()) + " friends",
                           p.resp.text, env.clock};
        policy_reflect(in, *a.policy, client, provider);
      }
    }
    frontier = std::move(next);
    detail::tick(env, client, cfg);
  }
  return out;
}

struct SimulationRun {
  SimulationConfig config;
  std::vector<CascadeOutcome> cascades;
  std::vector<DecisionLogEntry> decisions;
  TokenLedger ledger;
  std::vector<DecisionClient::Exchange> transcript;
};

// Cascades in the given order; agent memories carry over between items.
inline SimulationRun run_batch(Environment& env, const std::vector<const NewsItem*>& news, const SimulationConfig& cfg,
                               DecisionBackend& backend) {
  SimulationRun run;
  run.config = cfg;
  DecisionClient client(backend, cfg.keep_transcript);
  for (const auto* n : news) run.cascades.push_back(run_cascade(env, *n, cfg, client, &run.decisions));
  run.ledger = client.ledger();
  run.transcript = client.transcript();
  return run;
}

// ---- run files ---------------------------------------------------------------

struct ProviderSpec {
  std::string kind = "hash";
  std::size_t dim = 768;
  std::uint64_t seed = HashEmbeddingProvider::kDefaultSeed;
};

inline json to_json(const ProviderSpec& p) { return json{{"kind", p.kind}, {"dim", p.dim}, {"seed", p.seed}}; }

// One JSON object per line, each tagged by "kind": config, agent, cascade,
// decision, ledger. Contains no wall-clock data, so identical inputs give
// identical bytes.
inline void save_run(const std::filesystem::path& path, const Environment& env, const SimulationRun& run,
                     const ProviderSpec& provider, const std::string& backend_name) {
  std::vector<json> rows;
  rows.push_back({{"kind", "config"},
                  {"config", to_json(run.config)},
                  {"provider", to_json(provider)},
                  {"backend", backend_name}});
  for (const auto& a : env.agents)
    rows.push_back({{"kind", "agent"}, {"id", a.id}, {"role", to_string(a.role)}, {"persona", to_json(a.persona)}});
  for (const auto& c : run.cascades) {
    json row{{"kind", "cascade"}, {"status", c.aborted ? "aborted" : "ok"}, {"cascade", to_json(c.graph)}};
    if (c.aborted) row["error"] = c.error;
    rows.push_back(row);
  }
  for (const auto& d : run.decisions) {
    json row = to_json(d);
    row["kind"] = "decision";
    rows.push_back(row);
  }
  rows.push_back({{"kind", "ledger"}, {"ledger", run.ledger.to_json()}});
  write_jsonl(path, rows);
}

struct RunFile {
  SimulationConfig config;
  ProviderSpec provider;
  std::string backend;
  std::map<std::string, std::pair<Role, PersonaProfile>> roster;
  std::vector<CascadeGraph> cascades;
  std::vector<bool> aborted;
  std::vector<DecisionLogEntry> decisions;
  TokenLedger ledger;

  std::set<std::string> verifier_ids() const {
    std::set<std::string> out;
    for (const auto& [id, rp] : roster)
      if (rp.first == Role::Verifier) out.insert(id);
    return out;
  }
};

// Reads a run file; plain cascades.jsonl files (no kind tags) load as
// cascades with an empty roster.
inline RunFile load_run(const std::filesystem::path& path) {
  RunFile rf;
  for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
    const std::string kind = j.value("kind", std::string("cascade"));
    if (kind == "config") {
      rf.config = simulation_config_from_json(j.at("config"));
      const auto& p = j.at("provider");
      rf.provider = {p.at("kind").get<std::string>(), p.at("dim").get<std::size_t>(), p.at("seed").get<std::uint64_t>()};
      rf.backend = j.value("backend", std::string("mock"));
    } else if (kind == "agent") {
      rf.roster[j.at("id").get<std::string>()] = {parse_role(j.at("role").get<std::string>()),
                                                  persona_from_json(j.at("persona"))};
    } else if (kind == "cascade") {
      auto g = cascade_from_json(j.contains("cascade") ? j["cascade"] : j);
      try {
        g.validate();
      } catch (const IntegrityError& e) {
        throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      rf.cascades.push_back(std::move(g));
      rf.aborted.push_back(j.value("status", std::string("ok")) == "aborted");
    } else if (kind == "decision") {
      rf.decisions.push_back(decision_from_json(j));
    } else if (kind == "ledger") {
      rf.ledger = TokenLedger::from_json(j.at("ledger"));
    } else {
      throw Error("unknown record kind '" + kind + "'");
    }
  });
  return rf;
}

// ---- checkpoints -----------------------------------------------------------

// Roster with memory snapshots, RNG states and the decision log so far.
inline json checkpoint_json(const Environment& env, const std::vector<DecisionLogEntry>& log) {
  auto rng_json = [](const Rng& r) { return json(std::vector<std::uint64_t>(r.state().begin(), r.state().end())); };
  json agents = json::array();
  for (std::size_t i = 0; i < env.agents.size(); ++i) {
    const auto& a = env.agents[i];
    agents.push_back({{"id", a.id},
                      {"role", to_string(a.role)},
                      {"persona", to_json(a.persona)},
                      {"rng", rng_json(env.agent_rngs[i])},
                      {"memory", memory_snapshot(a)}});
  }
  json adj = json::object();
  for (std::size_t i = 0; i < env.agents.size(); ++i) {
    std::vector<std::string> nbrs;
    for (auto v : env.adjacency[i]) nbrs.push_back(env.agents[v].id);
    adj[env.agents[i].id] = nbrs;
  }
  json events = json::array();
  for (const auto& d : log) events.push_back(to_json(d));
  return json{{"version", 1},       {"clock", env.clock}, {"run_rng", rng_json(env.run_rng)},
              {"agents", agents}, {"adjacency", adj},   {"decisions", events}};
}

inline void save_checkpoint(const std::filesystem::path& path, const Environment& env,
                            const std::vector<DecisionLogEntry>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << checkpoint_json(env, log).dump() << '\n';
}

inline Environment restore_environment(const json& j, const EmbeddingProvider& provider, const SimulationConfig& cfg,
                                       std::vector<DecisionLogEntry>* log = nullptr) {
  if (j.value("version", 0) != 1) throw ParseError("checkpoint", 0, "unsupported checkpoint version");
  auto to_rng = [](const json& s) {
    Rng r;
    auto v = s.get<std::vector<std::uint64_t>>();
    if (v.size() != 4) throw ParseError("checkpoint", 0, "bad rng state");
    r.set_state({v[0], v[1], v[2], v[3]});
    return r;
  };
  Environment env;
  env.provider = &provider;
  env.clock = j.at("clock").get<std::int64_t>();
  env.run_rng = to_rng(j.at("run_rng"));
  for (const auto& aj : j.at("agents")) {
    auto persona = persona_from_json(aj.at("persona"));
    Agent a(aj.at("id").get<std::string>(), parse_role(aj.at("role").get<std::string>()), persona,
            provider.embed(persona.profile_text), cfg.memory);
    restore_memory(a, aj.at("memory"));
    env.index[a.id] = env.agents.size();
    env.agents.push_back(std::move(a));
    env.agent_rngs.push_back(to_rng(aj.at("rng")));
  }
  env.adjacency.resize(env.agents.size());
  for (const auto& [id, nbrs] : j.at("adjacency").items())
    for (const auto& v : nbrs) env.adjacency[env.index.at(id)].push_back(env.index.at(v.get<std::string>()));
  if (log)
    for (const auto& d : j.at("decisions")) log->push_back(decision_from_json(d));
  return env;
}

inline Environment load_checkpoint(const std::filesystem::path& path, const EmbeddingProvider& provider,
                                   const SimulationConfig& cfg, std::vector<DecisionLogEntry>* log = nullptr) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  return restore_environment(j, provider, cfg, log);
}

}  // namespace avoid
