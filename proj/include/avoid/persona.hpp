#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "avoid/backend.hpp"
#include "avoid/corpus.hpp"
#include "avoid/embed.hpp"
#include "avoid/error.hpp"
#include "avoid/random.hpp"

namespace avoid {

enum class Role { Diffuser, Verifier };

inline const char* to_string(Role r) { return r == Role::Diffuser ? "diffuser" : "verifier"; }

inline Role parse_role(std::string_view s) {
  if (s == "diffuser") return Role::Diffuser;
  if (s == "verifier") return Role::Verifier;
  throw Error("unknown role '" + std::string(s) + "'");
}

// ---- k-means -----------------------------------------------------------------

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline KMeansResult kmeans_once(const std::vector<std::vector<double>>& pts, int k, Rng& rng, int max_iter) {
  const std::size_t n = pts.size();
  KMeansResult r;
  // k-means++ seeding; falls back to the first unchosen point when all
  // remaining mass is zero (duplicate points).
  std::vector<bool> chosen(n, false);
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  r.centroids.push_back(pts[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  while (static_cast<int>(r.centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : r.centroids) best = std::min(best, sq_dist(pts[i], c));
      d2[i] = chosen[i] ? 0.0 : best;
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        u -= d2[i];
        if (u < 0.0) break;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
    }
    chosen[pick] = true;
    r.centroids.push_back(pts[pick]);
  }

  r.assignment.assign(n, -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(pts[i], r.centroids[0]);
      for (int c = 1; c < k; ++c) {
        double d = sq_dist(pts[i], r.centroids[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    // Empty clusters take the point farthest from its current centroid.
    std::vector<int> counts(k, 0);
    for (int a : r.assignment) ++counts[a];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[r.assignment[i]] <= 1) continue;
        double d = sq_dist(pts[i], r.centroids[r.assignment[i]]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      if (fd < 0.0) continue;
      --counts[r.assignment[far]];
      r.assignment[far] = c;
      ++counts[c];
      changed = true;
    }
    const std::size_t dim = pts.front().size();
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d) sums[r.assignment[i]][d] += pts[i][d];
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t d = 0; d < dim; ++d) r.centroids[c][d] = sums[c][d] / counts[c];
    if (!changed && iter > 0) break;
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += sq_dist(pts[i], r.centroids[r.assignment[i]]);
  return r;
}

}  // namespace detail

// Seeded Lloyd k-means with k-means++ initialisation; the restart with the
// lowest inertia wins (first one on ties).
inline KMeansResult kmeans(const std::vector<std::vector<double>>& pts, int k, std::uint64_t seed, int restarts = 10,
                           int max_iter = 100) {
  if (k < 1 || static_cast<std::size_t>(k) > pts.size())
    throw ConfigError("cluster count " + std::to_string(k) + " outside [1, " + std::to_string(pts.size()) + "]");
  Rng rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    auto res = detail::kmeans_once(pts, k, rng, max_iter);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

inline std::vector<std::vector<double>> as_points(const std::vector<Embedding>& es) {
  std::vector<std::vector<double>> pts;
  pts.reserve(es.size());
  for (const auto& e : es) pts.push_back(e.values);
  return pts;
}

inline std::vector<int> cluster_topics(const std::vector<Embedding>& news_embeddings, int m, std::uint64_t seed) {
  return kmeans(as_points(news_embeddings), m, seed).assignment;
}

struct PersonaGroup {
  int topic_id = 0;
  int group_id = 0;
  std::vector<std::string> member_ids;
  std::vector<Embedding> members;
  std::vector<double> centroid;
};

// Viewpoint clustering within one topic. Empty clusters are dropped and the
// surviving groups are numbered in cluster order.
inline std::vector<PersonaGroup> cluster_viewpoints(int topic_id, const std::vector<std::string>& comment_ids,
                                                    const std::vector<Embedding>& comment_embeddings, int clusters,
                                                    std::uint64_t seed) {
  if (comment_ids.size() != comment_embeddings.size()) throw DomainError("ids/embeddings size mismatch");
  auto res = kmeans(as_points(comment_embeddings), clusters, seed);
  std::vector<PersonaGroup> groups;
  for (int c = 0; c < clusters; ++c) {
    PersonaGroup g;
    g.topic_id = topic_id;
    for (std::size_t i = 0; i < comment_ids.size(); ++i)
      if (res.assignment[i] == c) {
        g.member_ids.push_back(comment_ids[i]);
        g.members.push_back(comment_embeddings[i]);
      }
    if (g.members.empty()) continue;
    g.group_id = static_cast<int>(groups.size());
    g.centroid = vec::mean(g.members);
    groups.push_back(std::move(g));
  }
  return groups;
}

// ---- balanced sampling -----------------------------------------------------

struct SamplingConfig {
  double w_p = 0.5;
  std::size_t k_s = 8;

  double w_d() const { return 1.0 - w_p; }
};

// Prototypicality/diversity objective over member indices of `g`:
// w_p * sum 1/(1+D(e_i, mu)) + w_d * (2/|R|) * sum_{a<b} D(e_a, e_b).
inline double balanced_objective(const PersonaGroup& g, const std::vector<std::size_t>& subset, double w_p) {
  if (subset.empty()) return 0.0;
  double proto = 0.0;
  for (auto i : subset) proto += 1.0 / (1.0 + vec::euclidean(g.members[i].view(), g.centroid));
  double div = 0.0;
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t b = a + 1; b < subset.size(); ++b)
      div += vec::euclidean(g.members[subset[a]].view(), g.members[subset[b]].view());
  return w_p * proto + (1.0 - w_p) * (2.0 / static_cast<double>(subset.size())) * div;
}

// Greedy maximisation of balanced_objective: each step adds the candidate with
// the largest marginal gain, ties broken by ascending comment id. Returns
// member indices in selection order.
inline std::vector<std::size_t> balanced_sample_indices(const PersonaGroup& g, const SamplingConfig& cfg) {
  if (cfg.k_s < 1) throw ConfigError("sample size must be >= 1");
  if (cfg.k_s > g.members.size())
    throw ConfigError("sample size " + std::to_string(cfg.k_s) + " exceeds group size " +
                      std::to_string(g.members.size()));
  if (cfg.w_p < 0.0 || cfg.w_p > 1.0) throw ConfigError("w_p must lie in [0,1]");
  std::vector<std::size_t> order(g.members.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return g.member_ids[a] < g.member_ids[b]; });

  std::vector<std::size_t> selected;
  std::vector<bool> used(g.members.size(), false);
  double current = 0.0;
  while (selected.size() < cfg.k_s) {
    std::size_t best = g.members.size();
    double best_gain = -std::numeric_limits<double>::infinity();
    for (auto i : order) {
      if (used[i]) continue;
      selected.push_back(i);
      double gain = balanced_objective(g, selected, cfg.w_p) - current;
      selected.pop_back();
      if (gain > best_gain) {
        best_gain = gain;
        best = i;
      }
    }
    used[best] = true;
    selected.push_back(best);
    current += best_gain;
  }
  return selected;
}

inline std::vector<std::string> balanced_sample(const PersonaGroup& g, const SamplingConfig& cfg) {
  std::vector<std::string> out;
  for (auto i : balanced_sample_indices(g, cfg)) out.push_back(g.member_ids[i]);
  return out;
}

// ---- distillation ----------------------------------------------------------

struct PersonaProfile {
  std::string profile_text;
  std::vector<std::string> evidence;
  int topic_id = 0;
  int group_id = 0;
  int refinement_rounds = 0;
  std::string source_split = "train";
  Role role = Role::Diffuser;
  bool converged = true;

  friend bool operator==(const PersonaProfile&, const PersonaProfile&) = default;
};

inline json to_json(const PersonaProfile& p) {
  return json{{"profile_text", p.profile_text},   {"evidence", p.evidence},
              {"topic_id", p.topic_id},           {"group_id", p.group_id},
              {"refinement_rounds", p.refinement_rounds}, {"source_split", p.source_split},
              {"role", to_string(p.role)},        {"converged", p.converged}};
}

inline PersonaProfile persona_from_json(const json& j) {
  PersonaProfile p;
  p.profile_text = detail::req<std::string>(j, "profile_text");
  p.evidence = j.value("evidence", std::vector<std::string>{});
  p.topic_id = j.value("topic_id", 0);
  p.group_id = j.value("group_id", 0);
  p.refinement_rounds = j.value("refinement_rounds", 0);
  p.source_split = j.value("source_split", std::string("train"));
  if (p.source_split != "train") throw IntegrityError("persona distilled from non-train split");
  p.role = parse_role(j.value("role", std::string("diffuser")));
  p.converged = j.value("converged", true);
  return p;
}

struct DistillConfig {
  double lambda = 0.7;
  std::size_t batch_size = 4;
  int max_rounds = 8;
};

struct EvidenceComment {
  std::string id;
  std::string text;
  Embedding embedding;
};

// Reflection loop: per evidence batch, the backend writes a comment from the
// current profile; when its cosine to the batch centre falls below lambda the
// backend revises the profile against the batch comment nearest the centre.
inline PersonaProfile distill_profile(const PersonaGroup& group, const std::vector<EvidenceComment>& selected,
                                      DecisionClient& client, const EmbeddingProvider& provider,
                                      const DistillConfig& cfg = {}) {
  if (selected.empty()) throw ConfigError("distill_profile: empty evidence set");
  if (cfg.batch_size == 0) throw ConfigError("distill batch size must be positive");
  PersonaProfile p;
  p.topic_id = group.topic_id;
  p.group_id = group.group_id;
  for (const auto& c : selected) p.evidence.push_back(c.id);

  auto nearest = [](const std::vector<const EvidenceComment*>& batch, const std::vector<double>& centre) {
    const EvidenceComment* best = batch.front();
    double bd = std::numeric_limits<double>::infinity();
    for (const auto* c : batch) {
      double d = vec::euclidean(c->embedding.view(), centre);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    return best;
  };

  {
    std::vector<const EvidenceComment*> all;
    for (const auto& c : selected) all.push_back(&c);
    std::vector<Embedding> es;
    for (const auto& c : selected) es.push_back(c.embedding);
    p.profile_text = "A user who writes comments like: " +
                     text::head_tokens(text::normalize_ws(nearest(all, vec::mean(es))->text), 25);
  }

  const std::size_t batches = (selected.size() + cfg.batch_size - 1) / cfg.batch_size;
  bool last_triggered = false;
  int round = 0;
  for (std::size_t b = 0; b < batches && round < cfg.max_rounds; ++b, ++round) {
    std::vector<const EvidenceComment*> batch;
    std::vector<Embedding> es;
    for (std::size_t i = b * cfg.batch_size; i < std::min(selected.size(), (b + 1) * cfg.batch_size); ++i) {
      batch.push_back(&selected[i]);
      es.push_back(selected[i].embedding);
    }
    const auto centre = vec::mean(es);
    try {
      auto gen = client.dispatch(make_request(PromptKind::Distill, {{"stage", "generate"}, {"persona", p.profile_text}}));
      double sim = 0.0;
      if (vec::norm(centre) > 0.0 && !text::normalize_ws(gen.text).empty())
        sim = cosine(provider.embed(gen.text).view(), centre);
      last_triggered = sim < cfg.lambda;
      if (!last_triggered) continue;
      auto rev = client.dispatch(make_request(PromptKind::Distill, {{"stage", "refine"},
                                                                     {"persona", p.profile_text},
                                                                     {"comment", gen.text},
                                                                     {"next_comment", nearest(batch, centre)->text}}));
      std::string revised;
      std::istringstream in(rev.text);
      for (std::string line; std::getline(in, line);)
        if (!text::trim(line).empty()) revised = text::trim(line);
      if (!revised.empty()) p.profile_text = revised;
      ++p.refinement_rounds;
    } catch (const std::exception& e) {
      throw Error("distill round " + std::to_string(round) + ": " + e.what());
    }
  }
  p.converged = !last_triggered;
  return p;
}

// ---- extraction pipeline ---------------------------------------------------

// Label-free view of the training split. The persona pipeline only ever sees
// these types, so veracity labels are unreachable from it.
struct SourceNews {
  std::string id;
  std::string text;
};

struct SourceComment {
  std::string id;
  std::string news_id;
  std::string user_id;
  std::string text;
  std::int64_t engagement = 0;
};

struct PersonaSource {
  std::vector<SourceNews> news;
  std::vector<SourceComment> comments;
};

inline PersonaSource training_view(const Corpus& corpus) {
  PersonaSource src;
  std::set<std::string> train_ids;
  for (const auto& n : corpus.news())
    if (n.split == Split::Train) {
      src.news.push_back({n.id, n.text});
      train_ids.insert(n.id);
    }
  for (const auto& c : corpus.comments())
    if (train_ids.count(c.news_id)) src.comments.push_back({c.id, c.news_id, c.user_id, c.text, c.engagement});
  return src;
}

struct ExtractConfig {
  int topics = 0;            // m; 0 selects ceil(sqrt(#news))
  int max_per_topic = 5;     // l_k = min(max_per_topic, |R_k|)
  SamplingConfig sampling{};
  DistillConfig distill{};
  std::uint64_t seed = 7;
  double verifier_fraction = 0.05;
  double engagement_quantile = 0.75;
  std::vector<std::string> citation_keywords{"according", "official", "study",    "report",   "data",
                                             "statistics", "source", "research", "government", "published",
                                             "evidence",  "confirmed"};
};

struct PersonaPool {
  std::vector<PersonaProfile> diffusers;
  std::vector<PersonaProfile> verifiers;

  std::vector<PersonaProfile> all() const {
    auto out = diffusers;
    out.insert(out.end(), verifiers.begin(), verifiers.end());
    return out;
  }
};

inline std::vector<PersonaProfile> extract_role_personas(const PersonaSource& src, Role role,
                                                         const EmbeddingProvider& provider, DecisionClient& client,
                                                         const ExtractConfig& cfg) {
  std::map<std::string, std::vector<const SourceComment*>> by_news;
  for (const auto& c : src.comments) by_news[c.news_id].push_back(&c);
  std::vector<const SourceNews*> news;
  for (const auto& n : src.news)
    if (by_news.count(n.id)) news.push_back(&n);
  if (news.empty()) return {};

  int m = cfg.topics > 0 ? cfg.topics : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(news.size()))));
  m = std::min<int>(m, static_cast<int>(news.size()));
  std::vector<Embedding> news_emb;
  for (const auto* n : news) news_emb.push_back(provider.embed(n->text));
  auto topic_of = cluster_topics(news_emb, m, cfg.seed);

  std::vector<PersonaProfile> out;
  for (int k = 0; k < m; ++k) {
    std::vector<std::string> ids;
    std::vector<Embedding> embs;
    std::map<std::string, const SourceComment*> lookup;
    for (std::size_t i = 0; i < news.size(); ++i) {
      if (topic_of[i] != k) continue;
      for (const auto* c : by_news[news[i]->id]) {
        ids.push_back(c->id);
        embs.push_back(provider.embed(c->text));
        lookup[c->id] = c;
      }
    }
    if (ids.empty()) continue;
    const int l = std::min<int>(cfg.max_per_topic, static_cast<int>(ids.size()));
    auto groups = cluster_viewpoints(k, ids, embs, l, cfg.seed + static_cast<std::uint64_t>(k) + 1);
    for (const auto& g : groups) {
      SamplingConfig sc = cfg.sampling;
      sc.k_s = std::min(sc.k_s, g.members.size());
      std::vector<EvidenceComment> ev;
      for (auto i : balanced_sample_indices(g, sc))
        ev.push_back({g.member_ids[i], lookup.at(g.member_ids[i])->text, g.members[i]});
      auto p = distill_profile(g, ev, client, provider, cfg.distill);
      p.role = role;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Diffuser personas come from all training comments. Verifier personas come
// from comments of the most influential users that carry strong engagement
// (at or above the configured quantile) and cite a source keyword.
inline PersonaPool extract_personas(const PersonaSource& src, const std::vector<UserRecord>& users,
                                    const EmbeddingProvider& provider, DecisionClient& client,
                                    const ExtractConfig& cfg = {}) {
  PersonaPool pool;
  pool.diffusers = extract_role_personas(src, Role::Diffuser, provider, client, cfg);

  auto top = top_influential(users, cfg.verifier_fraction);
  std::set<std::string> influential(top.begin(), top.end());
  std::vector<std::int64_t> eng;
  for (const auto& c : src.comments) eng.push_back(c.engagement);
  std::sort(eng.begin(), eng.end());
  std::int64_t threshold = 0;
  if (!eng.empty()) {
    auto idx = static_cast<std::size_t>(std::floor(cfg.engagement_quantile * static_cast<double>(eng.size() - 1)));
    threshold = eng[idx];
  }
  PersonaSource vsrc;
  vsrc.news = src.news;
  for (const auto& c : src.comments) {
    if (!influential.count(c.user_id) || c.engagement < threshold) continue;
    const auto toks = text::words(c.text);
    bool cites = std::any_of(toks.begin(), toks.end(), [&](const std::string& t) {
      return std::find(cfg.citation_keywords.begin(), cfg.citation_keywords.end(), t) != cfg.citation_keywords.end();
    });
    if (cites) vsrc.comments.push_back(c);
  }
  pool.verifiers = extract_role_personas(vsrc, Role::Verifier, provider, client, cfg);
  return pool;
}

inline void save_personas(const std::filesystem::path& path, const std::vector<PersonaProfile>& ps) {
  std::vector<json> rows;
  for (const auto& p : ps) rows.push_back(to_json(p));
  write_jsonl(path, rows);
}

inline PersonaPool load_personas(const std::filesystem::path& path) {
  PersonaPool pool;
  for_each_jsonl(path, [&](const json& j, std::size_t) {
    auto p = persona_from_json(j);
    (p.role == Role::Verifier ? pool.verifiers : pool.diffusers).push_back(std::move(p));
  });
  return pool;
}

}  // namespace avoid
