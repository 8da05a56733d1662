#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "avoid/detector.hpp"
#include "avoid/persona.hpp"
#include "avoid/propagate.hpp"

namespace avoid {

// Persona embeddings for cascade nodes, cached by node id. Nodes outside the
// roster fall back to an embedding of their id so real cascades still encode.
class NodeFeatures {
 public:
  NodeFeatures(const EmbeddingProvider& provider, std::map<std::string, std::string> persona_text)
      : provider_(&provider), text_(std::move(persona_text)) {}

  std::vector<double> operator()(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    auto t = text_.find(id);
    auto e = provider_->embed(t != text_.end() ? t->second : "user " + id);
    return cache_.emplace(id, e.values).first->second;
  }

 private:
  const EmbeddingProvider* provider_;
  std::map<std::string, std::string> text_;
  std::map<std::string, std::vector<double>> cache_;
};

inline std::map<std::string, std::string> roster_text(const Environment& env) {
  std::map<std::string, std::string> out;
  for (const auto& a : env.agents) out[a.id] = a.persona.profile_text;
  return out;
}

inline std::map<std::string, std::string> roster_text(const RunFile& rf) {
  std::map<std::string, std::string> out;
  for (const auto& [id, rp] : rf.roster) out[id] = rp.second.profile_text;
  return out;
}

// Encodes every labelled item in `news` that has a cascade; others are skipped.
inline std::vector<EncodedExample> build_examples(const std::vector<const NewsItem*>& news,
                                                  const std::map<std::string, CascadeGraph>& cascades,
                                                  NodeFeatures& features, TokenEmbedder& tokens) {
  std::vector<EncodedExample> out;
  std::function<std::vector<double>(const std::string&)> feat = [&](const std::string& id) { return features(id); };
  for (const auto* n : news) {
    if (!n->label) continue;
    auto it = cascades.find(n->id);
    if (it == cascades.end() || it->second.nodes.empty()) continue;
    out.push_back(encode_example(n->id, n->sentences, it->second, feat, *n->label, tokens));
  }
  return out;
}

inline std::map<std::string, CascadeGraph> index_cascades(const std::vector<CascadeGraph>& gs) {
  std::map<std::string, CascadeGraph> out;
  for (const auto& g : gs) out[g.news_id] = g;
  return out;
}

struct RouteRecord {
  std::string news_id;
  int label = -1;
  RouteDecision decision;
};

inline json to_json(const RouteRecord& r) {
  json j{{"news_id", r.news_id},
         {"p_fake", r.decision.p_fake},
         {"confidence", r.decision.conf},
         {"route", r.decision.easy ? "easy" : "hard"}};
  if (r.decision.easy) j["prediction"] = r.decision.prediction;
  if (r.label >= 0) j["label"] = r.label;
  return j;
}

struct RouteSummary {
  std::size_t total = 0, easy = 0, hard = 0;
};

inline RouteSummary summarize_routes(const std::vector<RouteRecord>& rs) {
  RouteSummary s;
  s.total = rs.size();
  for (const auto& r : rs) (r.decision.easy ? s.easy : s.hard)++;
  return s;
}

inline std::vector<RouteRecord> route_items(const Router& router, const std::vector<const NewsItem*>& items,
                                            const EmbeddingProvider& provider) {
  std::vector<RouteRecord> out;
  for (const auto* n : items) out.push_back({n->id, n->label ? *n->label : -1, route(router, provider.embed(n->text))});
  return out;
}

inline Router fit_router(const std::vector<const NewsItem*>& train, const EmbeddingProvider& provider,
                         const RouterConfig& cfg) {
  std::vector<Embedding> xs;
  std::vector<int> ys;
  for (const auto* n : train)
    if (n->label) {
      xs.push_back(provider.embed(n->text));
      ys.push_back(*n->label);
    }
  return train_router(xs, ys, cfg);
}

struct PipelineConfig {
  SimulationConfig sim{};
  ExtractConfig extract{};
  DetectorConfig detector{};
  RouterConfig router{};
  bool simulate_all_training = true;  // false: only routed-hard train/val items get cascades
  bool score_full_model = false;      // also score the fusion model on every test item
};

struct PipelineResult {
  PersonaPool personas;
  std::vector<RouteRecord> routes;  // test split
  RouteSummary summary;
  SimulationRun run;
  DetectorModel model;
  ClassificationMetrics test;
  std::optional<ClassificationMetrics> full_model_test;
  TokenLedger ledger;
  double seconds = 0.0;
};

/// route -> simulate -> train -> evaluate on one corpus with a decision
/// backend. Easy test items keep the router's prediction; hard ones get a
/// simulated cascade and the fusion model's prediction.
inline PipelineResult run_pipeline(const Corpus& corpus, const EmbeddingProvider& provider, DecisionBackend& backend,
                                   const PipelineConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  PipelineResult res;
  DecisionClient persona_client(backend);
  res.personas = extract_personas(training_view(corpus), corpus.users(), provider, persona_client, cfg.extract);
  res.ledger.merge(persona_client.ledger());

  const auto train = corpus.split(Split::Train), val = corpus.split(Split::Val), test = corpus.split(Split::Test);
  auto router = fit_router(train, provider, cfg.router);
  res.routes = route_items(router, test, provider);
  res.summary = summarize_routes(res.routes);

  std::vector<const NewsItem*> to_sim;
  auto add_split = [&](const std::vector<const NewsItem*>& items) {
    for (const auto* n : items)
      if (cfg.simulate_all_training || !route(router, provider.embed(n->text)).easy) to_sim.push_back(n);
  };
  add_split(train);
  add_split(val);
  for (std::size_t i = 0; i < test.size(); ++i)
    if (!res.routes[i].decision.easy) to_sim.push_back(test[i]);

  auto env = init_environment(corpus.users(), res.personas, provider, cfg.sim);
  res.run = run_batch(env, to_sim, cfg.sim, backend);
  res.ledger.merge(res.run.ledger);
  std::vector<CascadeGraph> graphs;
  for (const auto& c : res.run.cascades) graphs.push_back(c.graph);
  auto cascades = index_cascades(graphs);

  NodeFeatures features(provider, roster_text(env));
  TokenEmbedder tokens(cfg.detector.token_dim, cfg.detector.token_seed);
  auto det_cfg = cfg.detector;
  det_cfg.node_dim = provider.dim();
  auto train_ex = build_examples(train, cascades, features, tokens);
  auto val_ex = build_examples(val, cascades, features, tokens);
  res.model = train_detector(train_ex, val_ex, det_cfg);

  std::vector<int> labels, preds;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto* n = test[i];
    if (!n->label) continue;
    labels.push_back(*n->label);
    if (res.routes[i].decision.easy) {
      preds.push_back(res.routes[i].decision.prediction);
    } else {
      auto ex = build_examples({n}, cascades, features, tokens);
      if (ex.empty()) throw Error("hard item " + n->id + " has no cascade");
      preds.push_back(predict_fake(res.model.params, res.model.config, ex[0]) >= 0.5 ? 1 : 0);
    }
  }
  res.test = classification_metrics(labels, preds);

  if (cfg.score_full_model) {
    // Easy items get cascades only here, after the routed run has been recorded.
    std::vector<const NewsItem*> rest;
    for (std::size_t i = 0; i < test.size(); ++i)
      if (res.routes[i].decision.easy) rest.push_back(test[i]);
    auto extra = run_batch(env, rest, cfg.sim, backend);
    for (const auto& c : extra.cascades) cascades[c.graph.news_id] = c.graph;
    std::vector<int> fl, fp;
    for (const auto& ex : build_examples(test, cascades, features, tokens)) {
      fl.push_back(ex.label);
      fp.push_back(predict_fake(res.model.params, res.model.config, ex) >= 0.5 ? 1 : 0);
    }
    res.full_model_test = classification_metrics(fl, fp);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace avoid
