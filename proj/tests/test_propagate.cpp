#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avoid/propagate.hpp"
#include "support.hpp"

using namespace avoid;

namespace {

// Users u0..u{n-1} joined in a path; u0 gets the highest influence.
std::vector<UserRecord> path_users(std::size_t n) {
  std::vector<UserRecord> us(n);
  for (std::size_t i = 0; i < n; ++i) {
    us[i].id = "u" + std::to_string(i);
    us[i].follower_count = static_cast<std::int64_t>(i == 0 ? 1000 : 10 + i);
    us[i].avg_likes = i == 0 ? 50.0 : 1.0;
    us[i].repost_count = i == 0 ? 40 : 1;
    if (i > 0) us[i].neighbors.push_back(us[i - 1].id);
    if (i + 1 < n) us[i].neighbors.push_back("u" + std::to_string(i + 1));
  }
  return us;
}

PersonaPool pool() {
  PersonaPool p;
  PersonaProfile d;
  d.profile_text = "retired teacher who shares local weather and garden news";
  p.diffusers.push_back(d);
  PersonaProfile v = d;
  v.profile_text = "careful fact checker who reads primary sources";
  v.role = Role::Verifier;
  p.verifiers.push_back(v);
  return p;
}

NewsItem news(const std::string& id, const std::string& text) {
  NewsItem n;
  n.id = id;
  n.text = text;
  n.label = 0;
  return n;
}

// Action prompts get a scripted action, everything else the mock's reply.
ScriptedBackend actions(std::string diffuser, std::string verifier = "view") {
  auto mock = std::make_shared<MockBackend>();
  return ScriptedBackend([=](const DecisionRequest& r) {
    if (r.kind == PromptKind::DiffuserAction) return diffuser;
    if (r.kind == PromptKind::VerifierAction) return verifier;
    return mock->decide(r).text;
  });
}

std::size_t hops(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

std::size_t index_of(const std::string& id) { return std::stoul(id.substr(1)); }

const HashEmbeddingProvider kProvider(64);

}  // namespace

TEST_CASE("seed posts at step zero") {
  auto users = path_users(6);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.0;
  auto env = init_environment(users, pool(), kProvider, cfg);
  auto be = actions("view");
  DecisionClient client(be);
  auto out = run_cascade(env, news("n1", "storm hits the coast tonight"), cfg, client);
  REQUIRE_FALSE(out.aborted);
  const auto& g = out.graph;
  REQUIRE(g.seeds.size() == 1);
  CHECK(g.nodes == std::set<std::string>{g.seeds[0]});
  CHECK(g.edges.empty());
  CHECK(g.events.front().step == 0);
  CHECK(g.events.front().action == Action::Forward);
  CHECK(g.events.front().agent_id == g.seeds[0]);
  g.validate();
}

TEST_CASE("forward chains follow the graph up to the depth limit") {
  auto users = path_users(12);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.0;
  cfg.max_depth = 3;
  auto env = init_environment(users, pool(), kProvider, cfg);
  auto be = actions("forward");
  DecisionClient client(be);
  auto out = run_cascade(env, news("n1", "storm hits the coast tonight"), cfg, client);
  const auto& g = out.graph;
  g.validate();
  const auto seed = index_of(g.seeds[0]);
  std::set<std::string> expected;
  for (std::size_t i = 0; i < users.size(); ++i)
    if (hops(i, seed) <= 3) expected.insert(users[i].id);
  CHECK(g.nodes == expected);
  for (const auto& e : g.edges) {
    CHECK(e.step == static_cast<int>(hops(index_of(e.target), seed)));
    CHECK(hops(index_of(e.source), index_of(e.target)) == 1);
    CHECK(e.action == Action::Forward);
  }
  // every agent reacts at most once
  std::map<std::string, int> reactions;
  for (const auto& ev : g.events) ++reactions[ev.agent_id];
  for (const auto& [id, n] : reactions) CHECK(n == 1);
}

TEST_CASE("max_steps tightens the depth limit") {
  SimulationConfig cfg;
  cfg.max_depth = 4;
  cfg.max_steps = 2;
  CHECK(cfg.depth_limit() == 2);
  cfg.max_steps = 9;
  CHECK(cfg.depth_limit() == 4);

  auto users = path_users(12);
  cfg.verifier_fraction = 0.0;
  cfg.max_steps = 1;
  auto env = init_environment(users, pool(), kProvider, cfg);
  auto be = actions("forward");
  DecisionClient client(be);
  auto g = run_cascade(env, news("n1", "storm hits the coast tonight"), cfg, client).graph;
  for (const auto& e : g.edges) CHECK(e.step == 1);
  CHECK(g.nodes.size() <= 3);
}

TEST_CASE("like and comment join the cascade without spreading it") {
  auto users = path_users(8);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.0;
  for (std::string act : {"like", "I think so\ncomment"}) {
    auto env = init_environment(users, pool(), kProvider, cfg);
    auto be = actions(act);
    DecisionClient client(be);
    auto g = run_cascade(env, news("n1", "storm hits the coast tonight"), cfg, client).graph;
    const auto seed = index_of(g.seeds[0]);
    for (const auto& e : g.edges) {
      CHECK(e.step == 1);
      CHECK(hops(index_of(e.target), seed) == 1);
    }
    CHECK(g.nodes.size() == 1 + g.edges.size());
    if (act != "like") {
      for (const auto& ev : g.events)
        if (ev.step > 0) {
          CHECK(ev.action == Action::Comment);
          CHECK(ev.payload_text == std::optional<std::string>("I think so"));
        }
    }
  }
}

TEST_CASE("verifiers fact-check before acting and warnings reach neighbours") {
  // three users in a path, u0 the verifier; force the seed to be u1
  auto users = path_users(3);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.34;
  for (std::uint64_t s = 0;; ++s) {
    cfg.rng_seed = s;
    auto env = init_environment(users, pool(), kProvider, cfg);
    if (env.agents[env.index.at("u0")].role != Role::Verifier) FAIL("u0 should be the verifier");
    auto probe = env.run_rng;
    if (probe.below(3) != 1) continue;

    auto be = actions("forward", "warn");
    DecisionClient client(be);
    auto g = run_cascade(env, news("n1", "shocking secret cure exposed"), cfg, client).graph;
    REQUIRE(g.seeds == std::vector<std::string>{"u1"});
    std::vector<Action> u0_actions;
    for (const auto& ev : g.events)
      if (ev.agent_id == "u0") u0_actions.push_back(ev.action);
    CHECK(u0_actions == std::vector<Action>{Action::FactCheck, Action::Warn});
    CHECK(env.agent("u1").stm.has_warning_for("n1"));
    CHECK_FALSE(env.agent("u1").stm.has_warning_for("n2"));
    CHECK_FALSE(env.agent("u0").stm.has_warning_for("n1"));
    // u2 is two hops from the verifier
    CHECK_FALSE(env.agent("u2").stm.has_warning_for("n1"));

    cfg.global_warnings = true;
    auto env2 = init_environment(users, pool(), kProvider, cfg);
    DecisionClient client2(be);
    run_cascade(env2, news("n1", "shocking secret cure exposed"), cfg, client2);
    CHECK(env2.agent("u2").stm.has_warning_for("n1"));
    break;
  }
}

TEST_CASE("a warned diffuser only views under the mock") {
  auto users = path_users(3);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.0;
  auto env = init_environment(users, pool(), kProvider, cfg);
  for (auto& a : env.agents)
    a.stm.observe({"WARNING", kProvider.embed("WARNING"), 0, "x", "n1", true});
  MockBackend mock;
  DecisionClient client(mock);
  auto g = run_cascade(env, news("n1", "retired teacher shares local weather and garden news"), cfg, client).graph;
  CHECK(g.nodes.size() == 1);
  for (const auto& ev : g.events)
    if (ev.step > 0) CHECK(ev.action == Action::View);
}

TEST_CASE("identical seeds give identical runs") {
  auto users = path_users(10);
  SimulationConfig cfg;
  cfg.seed_count = 2;
  cfg.verifier_fraction = 0.1;
  std::vector<NewsItem> items{news("a", "storm hits the coast tonight"), news("b", "garden show opens downtown"),
                              news("c", "miracle cure leaked by insiders")};
  std::vector<const NewsItem*> ptrs;
  for (const auto& n : items) ptrs.push_back(&n);
  auto run = [&] {
    auto env = init_environment(users, pool(), kProvider, cfg);
    MockBackend mock;
    return run_batch(env, ptrs, cfg, mock);
  };
  auto r1 = run(), r2 = run();
  REQUIRE(r1.cascades.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(r1.cascades[i].graph == r2.cascades[i].graph);
  CHECK(r1.decisions.size() == r2.decisions.size());
  CHECK(r1.ledger.to_json() == r2.ledger.to_json());
}

TEST_CASE("checkpoint restore continues identically") {
  auto users = path_users(10);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.1;
  cfg.consolidation_period = 2;
  auto first = news("a", "storm hits the coast tonight");
  auto second = news("b", "storm damage closes the coast road");
  MockBackend mock;

  auto env = init_environment(users, pool(), kProvider, cfg);
  DecisionClient client(mock);
  std::vector<DecisionLogEntry> log;
  run_cascade(env, first, cfg, client, &log);
  TempDir dir("propagate");
  save_checkpoint(dir / "ckpt.json", env, log);

  std::vector<DecisionLogEntry> restored_log;
  auto restored = load_checkpoint(dir / "ckpt.json", kProvider, cfg, &restored_log);
  CHECK(restored_log.size() == log.size());
  CHECK(checkpoint_json(restored, restored_log) == checkpoint_json(env, log));

  DecisionClient c1(mock), c2(mock);
  auto g1 = run_cascade(env, second, cfg, c1).graph;
  auto g2 = run_cascade(restored, second, cfg, c2).graph;
  CHECK(g1 == g2);
  CHECK(checkpoint_json(env, {}) == checkpoint_json(restored, {}));
}

TEST_CASE("bad checkpoints are rejected") {
  TempDir dir("propagate-bad");
  write_file(dir / "c.json", "{\"version\": 7}");
  SimulationConfig cfg;
  CHECK_THROWS_AS(load_checkpoint(dir / "c.json", kProvider, cfg), ParseError);
  write_file(dir / "d.json", "{ nope");
  CHECK_THROWS_AS(load_checkpoint(dir / "d.json", kProvider, cfg), ParseError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.json", kProvider, cfg), InputError);
}

TEST_CASE("run files round trip") {
  auto users = path_users(6);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.2;
  auto env = init_environment(users, pool(), kProvider, cfg);
  std::vector<NewsItem> items{news("a", "storm hits the coast tonight"), news("b", "garden show opens downtown")};
  std::vector<const NewsItem*> ptrs{&items[0], &items[1]};
  MockBackend mock;
  auto run = run_batch(env, ptrs, cfg, mock);
  TempDir dir("runfile");
  save_run(dir / "run.jsonl", env, run, {"hash", 64, HashEmbeddingProvider::kDefaultSeed}, "mock");
  auto rf = load_run(dir / "run.jsonl");
  CHECK(rf.backend == "mock");
  CHECK(rf.provider.dim == 64);
  CHECK(rf.config.rng_seed == cfg.rng_seed);
  CHECK(rf.roster.size() == users.size());
  CHECK(rf.verifier_ids() == std::set<std::string>{"u0"});
  REQUIRE(rf.cascades.size() == 2);
  CHECK(rf.cascades[0] == run.cascades[0].graph);
  CHECK(rf.aborted == std::vector<bool>{false, false});
  CHECK(rf.decisions.size() == run.decisions.size());
  CHECK(rf.ledger.to_json() == run.ledger.to_json());

  write_file(dir / "bad.jsonl", "{\"kind\": \"mystery\"}\n");
  CHECK_THROWS_AS(load_run(dir / "bad.jsonl"), Error);
}

TEST_CASE("transport failure aborts the cascade and keeps the partial graph") {
  auto users = path_users(8);
  SimulationConfig cfg;
  cfg.verifier_fraction = 0.0;
  auto env = init_environment(users, pool(), kProvider, cfg);
  int calls = 0;
  ScriptedBackend be([&](const DecisionRequest& r) -> std::string {
    if (r.kind == PromptKind::DiffuserAction && ++calls > 2) throw TransportError(503, "down");
    return "forward";
  });
  DecisionClient client(be);
  auto out = run_cascade(env, news("n1", "storm hits the coast tonight"), cfg, client);
  CHECK(out.aborted);
  CHECK(out.error.find("503") != std::string::npos);
  CHECK_FALSE(out.graph.seeds.empty());
  out.graph.validate();
}

TEST_CASE("configuration errors") {
  SimulationConfig cfg;
  cfg.verifier_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.consolidation_period = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  CHECK_THROWS_AS(init_environment({}, pool(), kProvider, cfg), ConfigError);
  CHECK_THROWS_AS(init_environment(path_users(3), PersonaPool{}, kProvider, cfg), ConfigError);
  cfg.seed_count = 5;
  auto env = init_environment(path_users(3), pool(), kProvider, cfg);
  MockBackend mock;
  DecisionClient client(mock);
  CHECK_THROWS_AS(run_cascade(env, news("n", "storm"), cfg, client), ConfigError);
}
