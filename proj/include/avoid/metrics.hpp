#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "avoid/corpus.hpp"

namespace avoid {

enum class DegreeConvention { Out, In, Total };

inline const char* to_string(DegreeConvention c) {
  switch (c) {
    case DegreeConvention::Out: return "out";
    case DegreeConvention::In: return "in";
    case DegreeConvention::Total: return "total";
  }
  return "?";
}

inline DegreeConvention parse_degree_convention(const std::string& s) {
  if (s == "out") return DegreeConvention::Out;
  if (s == "in") return DegreeConvention::In;
  if (s == "total") return DegreeConvention::Total;
  throw ConfigError("unknown degree convention '" + s + "'");
}

struct CascadeStats {
  double cascade_depth = 0.0;
  double avg_degree = 0.0;
  double density = 0.0;
  double structural_virality = 0.0;
  double clustering = 0.0;
};

// Compact integer view of a cascade: distinct directed pairs, self-loops dropped.
struct IndexedGraph {
  std::size_t n = 0;
  std::vector<std::pair<std::size_t, std::size_t>> arcs;
  std::vector<std::size_t> seeds;

  explicit IndexedGraph(const CascadeGraph& g) {
    std::map<std::string, std::size_t> ix;
    for (const auto& v : g.nodes) ix.emplace(v, n++);
    std::set<std::pair<std::size_t, std::size_t>> uniq;
    for (const auto& e : g.edges) {
      auto s = ix.find(e.source), t = ix.find(e.target);
      if (s == ix.end() || t == ix.end()) throw IntegrityError("edge endpoint outside node set");
      if (s->second != t->second) uniq.emplace(s->second, t->second);
    }
    arcs.assign(uniq.begin(), uniq.end());
    for (const auto& s : g.seeds) seeds.push_back(ix.at(s));
  }

  std::vector<std::vector<std::size_t>> out_adj() const {
    std::vector<std::vector<std::size_t>> a(n);
    for (auto [s, t] : arcs) a[s].push_back(t);
    return a;
  }

  std::vector<std::set<std::size_t>> undirected() const {
    std::vector<std::set<std::size_t>> a(n);
    for (auto [s, t] : arcs) {
      a[s].insert(t);
      a[t].insert(s);
    }
    return a;
  }
};

inline std::size_t cascade_depth(const CascadeGraph& g) {
  IndexedGraph ig(g);
  auto adj = ig.out_adj();
  std::vector<long> dist(ig.n, -1);
  std::queue<std::size_t> q;
  for (auto s : ig.seeds)
    if (dist[s] < 0) {
      dist[s] = 0;
      q.push(s);
    }
  long best = 0;
  while (!q.empty()) {
    auto u = q.front();
    q.pop();
    best = std::max(best, dist[u]);
    for (auto v : adj[u])
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        q.push(v);
      }
  }
  return static_cast<std::size_t>(best);
}

inline double density(const CascadeGraph& g) {
  IndexedGraph ig(g);
  if (ig.n < 2) return 0.0;
  return static_cast<double>(ig.arcs.size()) / (static_cast<double>(ig.n) * static_cast<double>(ig.n - 1));
}

// |E|/n for in or out degree (the two means coincide), 2|E|/n for total.
inline double avg_degree(const CascadeGraph& g, DegreeConvention c = DegreeConvention::Out) {
  IndexedGraph ig(g);
  if (ig.n == 0) return 0.0;
  double m = static_cast<double>(ig.arcs.size());
  if (c == DegreeConvention::Total) m *= 2.0;
  return m / static_cast<double>(ig.n);
}

inline std::vector<std::size_t> node_degrees(const CascadeGraph& g, DegreeConvention c) {
  IndexedGraph ig(g);
  std::vector<std::size_t> d(ig.n, 0);
  for (auto [s, t] : ig.arcs) {
    if (c != DegreeConvention::In) ++d[s];
    if (c != DegreeConvention::Out) ++d[t];
  }
  return d;
}

// Mean undirected shortest-path length over connected node pairs; with
// several components this is the pair-weighted mean of per-component values.
inline double structural_virality(const CascadeGraph& g) {
  IndexedGraph ig(g);
  if (ig.n < 2) return 0.0;
  auto adj = ig.undirected();
  double total = 0.0;
  double pairs = 0.0;
  std::vector<long> dist(ig.n);
  for (std::size_t s = 0; s < ig.n; ++s) {
    std::fill(dist.begin(), dist.end(), -1);
    dist[s] = 0;
    std::queue<std::size_t> q;
    q.push(s);
    while (!q.empty()) {
      auto u = q.front();
      q.pop();
      for (auto v : adj[u])
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          q.push(v);
        }
    }
    for (std::size_t t = s + 1; t < ig.n; ++t)
      if (dist[t] > 0) {
        total += static_cast<double>(dist[t]);
        pairs += 1.0;
      }
  }
  return pairs > 0.0 ? total / pairs : 0.0;
}

inline double clustering(const CascadeGraph& g) {
  IndexedGraph ig(g);
  if (ig.n == 0) return 0.0;
  auto adj = ig.undirected();
  double sum = 0.0;
  for (std::size_t u = 0; u < ig.n; ++u) {
    std::vector<std::size_t> nb(adj[u].begin(), adj[u].end());
    const auto k = nb.size();
    if (k < 2) continue;
    std::size_t links = 0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j)
        if (adj[nb[i]].count(nb[j])) ++links;
    sum += 2.0 * static_cast<double>(links) / (static_cast<double>(k) * static_cast<double>(k - 1));
  }
  return sum / static_cast<double>(ig.n);
}

inline CascadeStats cascade_stats(const CascadeGraph& g, DegreeConvention c = DegreeConvention::Out) {
  return {static_cast<double>(cascade_depth(g)), avg_degree(g, c), density(g), structural_virality(g), clustering(g)};
}

inline CascadeStats mean_stats(const std::vector<CascadeGraph>& gs, DegreeConvention c = DegreeConvention::Out) {
  if (gs.empty()) throw InputError("no cascades to summarise");
  CascadeStats m;
  for (const auto& g : gs) {
    auto s = cascade_stats(g, c);
    m.cascade_depth += s.cascade_depth;
    m.avg_degree += s.avg_degree;
    m.density += s.density;
    m.structural_virality += s.structural_virality;
    m.clustering += s.clustering;
  }
  const double k = static_cast<double>(gs.size());
  m.cascade_depth /= k;
  m.avg_degree /= k;
  m.density /= k;
  m.structural_virality /= k;
  m.clustering /= k;
  return m;
}

// ---- degree distributions --------------------------------------------------

inline std::vector<double> degree_distribution(const std::vector<CascadeGraph>& gs, DegreeConvention c) {
  std::vector<double> h;
  double total = 0.0;
  for (const auto& g : gs)
    for (auto d : node_degrees(g, c)) {
      if (d >= h.size()) h.resize(d + 1, 0.0);
      h[d] += 1.0;
      total += 1.0;
    }
  if (total == 0.0) throw InputError("degree distribution over zero nodes");
  for (auto& x : h) x /= total;
  return h;
}

// Base-2 Jensen-Shannon divergence; shorter inputs are zero-padded.
inline double jsd(std::vector<double> p, std::vector<double> q) {
  const auto n = std::max(p.size(), q.size());
  p.resize(n, 0.0);
  q.resize(n, 0.0);
  double out = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) out += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) out += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(out, 0.0, 1.0);
}

inline double degree_jsd(const std::vector<CascadeGraph>& real, const std::vector<CascadeGraph>& virt,
                         DegreeConvention c = DegreeConvention::Out) {
  if (real.empty() || virt.empty()) throw InputError("degree_jsd needs two nonempty cascade sets");
  return jsd(degree_distribution(real, c), degree_distribution(virt, c));
}

// ---- behaviour ---------------------------------------------------------------

struct BehaviorStats {
  double verifier_count = 0.0;
  std::size_t comments = 0;
  bool stance_defined = false;
  double pos = 0.0, neu = 0.0, neg = 0.0;  // percentages
};

// Verifier participation per cascade counts roster verifiers among the nodes
// plus any agent that emitted a fact_check or warn event.
inline BehaviorStats behavior_report(const std::vector<CascadeGraph>& gs, const std::set<std::string>& verifiers) {
  BehaviorStats b;
  if (gs.empty()) return b;
  std::size_t counts[3] = {0, 0, 0};
  double vsum = 0.0;
  for (const auto& g : gs) {
    std::set<std::string> who;
    for (const auto& v : g.nodes)
      if (verifiers.count(v)) who.insert(v);
    for (const auto& e : g.events) {
      if (is_verifier_only(e.action)) who.insert(e.agent_id);
      if (e.action == Action::Comment && e.stance) {
        ++counts[static_cast<int>(*e.stance)];
        ++b.comments;
      }
    }
    vsum += static_cast<double>(who.size());
  }
  b.verifier_count = vsum / static_cast<double>(gs.size());
  if (b.comments > 0) {
    b.stance_defined = true;
    const double n = static_cast<double>(b.comments);
    b.pos = 100.0 * static_cast<double>(counts[static_cast<int>(Stance::Pos)]) / n;
    b.neu = 100.0 * static_cast<double>(counts[static_cast<int>(Stance::Neu)]) / n;
    b.neg = 100.0 * static_cast<double>(counts[static_cast<int>(Stance::Neg)]) / n;
  }
  return b;
}

// ---- reports -----------------------------------------------------------------

struct PublishedReference {
  std::string dataset;
  CascadeStats real, virt;
  double jsd = 0.0;
  double verifier_real = 0.0, verifier_virt = 0.0;
  double stance_real[3]{}, stance_virt[3]{};
};

inline const std::vector<PublishedReference>& published_references() {
  static const std::vector<PublishedReference> refs = {
      {"politifact",
       {4.203, 1.884, 0.016, 2.808, 0.114},
       {4.452, 2.163, 0.022, 2.932, 0.124},
       0.078,
       4.88,
       5.00,
       {54.6, 9.3, 36.1},
       {57.8, 10.7, 31.5}},
      {"gossipcop",
       {3.086, 2.123, 0.051, 2.302, 0.070},
       {3.221, 2.635, 0.043, 2.186, 0.065},
       0.104,
       2.29,
       2.00,
       {75.8, 18.4, 5.8},
       {73.2, 22.1, 3.7}},
  };
  return refs;
}

inline const PublishedReference* find_reference(const std::string& dataset) {
  for (const auto& r : published_references())
    if (r.dataset == dataset) return &r;
  return nullptr;
}

struct ReportRow {
  std::string metric;
  double real = 0.0;
  double virt = 0.0;
  double delta = 0.0;           // virt - real
  std::optional<double> rel;    // delta / |real|, absent when real == 0
  std::optional<double> ref_real, ref_virt;
};

struct ComparisonReport {
  std::vector<ReportRow> rows;
  std::optional<double> jsd;
  std::optional<double> ref_jsd;
};

inline ComparisonReport compare_report(const CascadeStats& real, const CascadeStats& virt,
                                       std::optional<double> jsd_value = std::nullopt,
                                       const PublishedReference* ref = nullptr) {
  auto row = [](std::string name, double r, double v) {
    ReportRow x{std::move(name), r, v, v - r, std::nullopt, std::nullopt, std::nullopt};
    if (r != 0.0) x.rel = (v - r) / std::abs(r);
    return x;
  };
  ComparisonReport rep;
  rep.rows = {row("cascade_depth", real.cascade_depth, virt.cascade_depth),
              row("avg_degree", real.avg_degree, virt.avg_degree), row("density", real.density, virt.density),
              row("structural_virality", real.structural_virality, virt.structural_virality),
              row("clustering", real.clustering, virt.clustering)};
  rep.jsd = jsd_value;
  if (ref) {
    const double rr[] = {ref->real.cascade_depth, ref->real.avg_degree, ref->real.density,
                         ref->real.structural_virality, ref->real.clustering};
    const double rv[] = {ref->virt.cascade_depth, ref->virt.avg_degree, ref->virt.density,
                         ref->virt.structural_virality, ref->virt.clustering};
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      rep.rows[i].ref_real = rr[i];
      rep.rows[i].ref_virt = rv[i];
    }
    rep.ref_jsd = ref->jsd;
  }
  return rep;
}

namespace detail {
inline std::string fmt3(std::optional<double> v) {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}
inline std::string fmt_signed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.3f", v);
  return buf;
}
}  // namespace detail

inline std::string render_table(const ComparisonReport& rep) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %10s %10s %10s %9s %10s %10s\n", "metric", "real", "virtual", "delta",
                "rel", "ref_real", "ref_virt");
  os << line;
  for (const auto& r : rep.rows) {
    std::string rel = r.rel ? detail::fmt3(*r.rel * 100.0) + "%" : "-";
    std::snprintf(line, sizeof line, "%-20s %10s %10s %10s %9s %10s %10s\n", r.metric.c_str(),
                  detail::fmt3(r.real).c_str(), detail::fmt3(r.virt).c_str(), detail::fmt_signed(r.delta).c_str(),
                  rel.c_str(), detail::fmt3(r.ref_real).c_str(), detail::fmt3(r.ref_virt).c_str());
    os << line;
  }
  if (rep.jsd || rep.ref_jsd) {
    std::snprintf(line, sizeof line, "%-20s %10s %10s %10s %9s %10s %10s\n", "degree_jsd", "", detail::fmt3(rep.jsd).c_str(), "",
                  "", detail::fmt3(rep.ref_jsd).c_str(), "");
    os << line;
  }
  return os.str();
}

inline json to_json(const ComparisonReport& rep) {
  json rows = json::array();
  for (const auto& r : rep.rows) {
    json j{{"metric", r.metric}, {"real", r.real}, {"virtual", r.virt}, {"delta", r.delta}};
    j["relative"] = r.rel ? json(*r.rel) : json(nullptr);
    if (r.ref_real) j["reference_real"] = *r.ref_real;
    if (r.ref_virt) j["reference_virtual"] = *r.ref_virt;
    rows.push_back(j);
  }
  json out{{"rows", rows}};
  out["degree_jsd"] = rep.jsd ? json(*rep.jsd) : json(nullptr);
  if (rep.ref_jsd) out["reference_degree_jsd"] = *rep.ref_jsd;
  return out;
}

inline json to_json(const BehaviorStats& b) {
  json j{{"verifier_count", b.verifier_count}, {"comments", b.comments}, {"stance_defined", b.stance_defined}};
  if (b.stance_defined) j["stance"] = {{"pos", b.pos}, {"neu", b.neu}, {"neg", b.neg}};
  return j;
}

inline std::string render_behavior(const std::string& label, const BehaviorStats& b) {
  char line[256];
  if (b.stance_defined)
    std::snprintf(line, sizeof line, "%-10s verifier %6.2f  stance %.1f : %.1f : %.1f (%zu comments)\n",
                  label.c_str(), b.verifier_count, b.pos, b.neu, b.neg, b.comments);
  else
    std::snprintf(line, sizeof line, "%-10s verifier %6.2f  stance undefined (no comments)\n", label.c_str(),
                  b.verifier_count);
  return line;
}

}  // namespace avoid
