#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "avoid/corpus.hpp"
#include "avoid/embed.hpp"
#include "avoid/random.hpp"
#include "avoid/tensor.hpp"

namespace avoid {

using ag::Tensor;
using ParamMap = std::map<std::string, Tensor>;

struct DetectorConfig {
  std::size_t token_dim = 32;   // d_e
  std::size_t hidden = 64;      // d_h, both recurrent levels
  std::size_t gat_hidden = 128;
  std::size_t latent = 32;      // d
  std::size_t cls_hidden = 32;
  std::size_t node_dim = 768;   // persona embedding width
  double lambda_rec = 0.5;
  double lambda_skl = 0.4;
  double sigma_x2 = 1.0;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  int patience = 6;
  int max_epochs = 100;
  std::uint64_t seed = 7;
  std::uint64_t token_seed = 0x70c3;
  std::string monitor = "cls";  // validation quantity for early stopping: "cls" or "total"

  void validate() const {
    if (!token_dim || !hidden || !gat_hidden || !latent || !cls_hidden || !node_dim)
      throw ConfigError("detector widths must be positive");
    if (lambda_rec < 0 || lambda_skl < 0) throw ConfigError("loss weights must be non-negative");
    if (!(sigma_x2 > 0)) throw ConfigError("sigma_x2 must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0 || max_epochs < 1 || patience < 1) throw ConfigError("bad training schedule");
    if (monitor != "cls" && monitor != "total") throw ConfigError("monitor must be cls or total");
  }
};

inline json to_json(const DetectorConfig& c) {
  return json{{"token_dim", c.token_dim}, {"hidden", c.hidden},         {"gat_hidden", c.gat_hidden},
              {"latent", c.latent},       {"cls_hidden", c.cls_hidden}, {"node_dim", c.node_dim},
              {"lambda_rec", c.lambda_rec}, {"lambda_skl", c.lambda_skl}, {"sigma_x2", c.sigma_x2},
              {"lr", c.lr},               {"batch_size", c.batch_size}, {"patience", c.patience},
              {"max_epochs", c.max_epochs}, {"seed", c.seed},           {"token_seed", c.token_seed},
              {"monitor", c.monitor}};
}

inline DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  c.token_dim = j.value("token_dim", c.token_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.gat_hidden = j.value("gat_hidden", c.gat_hidden);
  c.latent = j.value("latent", c.latent);
  c.cls_hidden = j.value("cls_hidden", c.cls_hidden);
  c.node_dim = j.value("node_dim", c.node_dim);
  c.lambda_rec = j.value("lambda_rec", c.lambda_rec);
  c.lambda_skl = j.value("lambda_skl", c.lambda_skl);
  c.sigma_x2 = j.value("sigma_x2", c.sigma_x2);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.token_seed = j.value("token_seed", c.token_seed);
  c.monitor = j.value("monitor", c.monitor);
  return c;
}

// Fixed random token vectors: N(0, 1/d) entries from a stream keyed by the word.
class TokenEmbedder {
 public:
  TokenEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

  const std::vector<double>& get(const std::string& word) {
    auto it = cache_.find(word);
    if (it != cache_.end()) return it->second;
    Rng r(fnv1a64(word, seed_));
    std::vector<double> v(dim_);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (auto& x : v) x = r.normal(0.0, s);
    return cache_.emplace(word, std::move(v)).first->second;
  }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

// ---- inputs ------------------------------------------------------------------

// Pre-built constant tensors for one (news, cascade) pair. Sentences are
// padded to a common length T; padded steps leave hidden states unchanged
// and receive zero attention.
struct EncodedExample {
  std::string id;
  int label = 0;  // 1 = fake
  std::size_t sentences = 0, steps = 0;
  std::vector<Tensor> inputs;      // T tensors of S x d_e
  std::vector<Tensor> step_masks;  // T tensors of S x 1 (1 = real token)
  Tensor time_bias;                // S x T, 0 or -1e30
  Tensor nodes;                    // n x node_dim
  Tensor adj_bias;                 // n x n, 0 on neighbours (incl. self) else -1e30
};

inline constexpr double kMaskedLogit = -1e30;

inline EncodedExample encode_example(const std::string& id, const std::vector<std::vector<std::string>>& sentences,
                                     const CascadeGraph& graph,
                                     const std::function<std::vector<double>(const std::string&)>& node_feature,
                                     int label, TokenEmbedder& tokens) {
  EncodedExample ex;
  ex.id = id;
  ex.label = label;
  std::vector<const std::vector<std::string>*> sents;
  for (const auto& s : sentences)
    if (!s.empty()) sents.push_back(&s);
  if (sents.empty()) throw InputError("news " + id + ": empty document");
  if (graph.nodes.empty()) throw InputError("news " + id + ": cascade has no nodes");
  const auto S = sents.size();
  std::size_t T = 0;
  for (auto* s : sents) T = std::max(T, s->size());
  ex.sentences = S;
  ex.steps = T;
  const auto d = tokens.dim();
  std::vector<double> bias(S * T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> x(S * d, 0.0), m(S, 0.0);
    for (std::size_t j = 0; j < S; ++j) {
      if (t < sents[j]->size()) {
        const auto& v = tokens.get((*sents[j])[t]);
        std::copy(v.begin(), v.end(), x.begin() + static_cast<long>(j * d));
        m[j] = 1.0;
      } else {
        bias[j * T + t] = kMaskedLogit;
      }
    }
    ex.inputs.push_back(Tensor::from(S, d, std::move(x)));
    ex.step_masks.push_back(Tensor::from(S, 1, std::move(m)));
  }
  ex.time_bias = Tensor::from(S, T, std::move(bias));

  std::map<std::string, std::size_t> ix;
  std::vector<double> feats;
  std::size_t fdim = 0;
  for (const auto& v : graph.nodes) {
    auto f = node_feature(v);
    if (ix.empty()) fdim = f.size();
    if (f.size() != fdim || fdim == 0) throw InputError("node feature width mismatch for " + v);
    ix[v] = ix.size();
    feats.insert(feats.end(), f.begin(), f.end());
  }
  const auto n = ix.size();
  ex.nodes = Tensor::from(n, fdim, std::move(feats));
  std::vector<double> adj(n * n, kMaskedLogit);
  for (std::size_t i = 0; i < n; ++i) adj[i * n + i] = 0.0;
  for (const auto& e : graph.edges) {
    auto a = ix.at(e.source), b = ix.at(e.target);
    adj[a * n + b] = 0.0;
    adj[b * n + a] = 0.0;
  }
  ex.adj_bias = Tensor::from(n, n, std::move(adj));
  return ex;
}

// ---- parameters --------------------------------------------------------------

inline void add_gru(ParamMap& p, const std::string& name, std::size_t in, std::size_t h, Rng& rng) {
  p[name + ".W_i"] = Tensor::glorot(in, 3 * h, rng);
  p[name + ".W_h"] = Tensor::glorot(h, 3 * h, rng);
  p[name + ".b_i"] = Tensor::zeros(1, 3 * h, true);
  p[name + ".b_h"] = Tensor::zeros(1, 3 * h, true);
}

inline void add_linear(ParamMap& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p[name + ".W"] = Tensor::glorot(in, out, rng);
  p[name + ".b"] = Tensor::zeros(1, out, true);
}

inline ParamMap init_detector_params(const DetectorConfig& c) {
  c.validate();
  Rng rng = Rng::derive(c.seed, "init");
  ParamMap p;
  const auto h = c.hidden, g = c.gat_hidden, d = c.latent;
  add_gru(p, "content.word_gru", c.token_dim, h, rng);
  add_linear(p, "content.word_att", h, h, rng);
  p["content.u_w"] = Tensor::glorot(h, 1, rng);
  add_gru(p, "content.sent_gru", h, h, rng);
  add_linear(p, "content.sent_att", h, h, rng);
  p["content.u_s"] = Tensor::glorot(h, 1, rng);
  p["graph.l1.U"] = Tensor::glorot(c.node_dim, g, rng);
  p["graph.l1.a_src"] = Tensor::glorot(g, 1, rng);
  p["graph.l1.a_dst"] = Tensor::glorot(g, 1, rng);
  p["graph.l2.U"] = Tensor::glorot(g, g, rng);
  p["graph.l2.a_src"] = Tensor::glorot(g, 1, rng);
  p["graph.l2.a_dst"] = Tensor::glorot(g, 1, rng);
  add_linear(p, "fusion.f_c", h, d, rng);
  add_linear(p, "fusion.f_g", g, d, rng);
  add_linear(p, "fusion.mu", d, d, rng);
  add_linear(p, "fusion.logvar", d, d, rng);
  add_linear(p, "fusion.decoder", d, d, rng);
  add_linear(p, "fusion.gate", 2 * d, 1, rng);
  add_linear(p, "cls.hidden", d, c.cls_hidden, rng);
  add_linear(p, "cls.out", c.cls_hidden, 2, rng);
  return p;
}

inline Tensor linear(const ParamMap& p, const std::string& name, const Tensor& x) {
  return ag::add_row(ag::matmul(x, p.at(name + ".W")), p.at(name + ".b"));
}

// ---- content encoder ---------------------------------------------------------

// r, z, n gates in that column order; h' = (1 - z) * n + z * h.
inline Tensor gru_step(const ParamMap& p, const std::string& name, const Tensor& x, const Tensor& h) {
  const auto H = h.cols();
  auto gi = ag::add_row(ag::matmul(x, p.at(name + ".W_i")), p.at(name + ".b_i"));
  auto gh = ag::add_row(ag::matmul(h, p.at(name + ".W_h")), p.at(name + ".b_h"));
  auto r = ag::sigmoid(ag::add(ag::slice_cols(gi, 0, H), ag::slice_cols(gh, 0, H)));
  auto z = ag::sigmoid(ag::add(ag::slice_cols(gi, H, H), ag::slice_cols(gh, H, H)));
  auto n = ag::tanh(ag::add(ag::slice_cols(gi, 2 * H, H), ag::mul(r, ag::slice_cols(gh, 2 * H, H))));
  return ag::add(ag::mul(ag::affine(z, -1.0, 1.0), n), ag::mul(z, h));
}

struct ContentOut {
  Tensor x_c;    // 1 x d_h
  Tensor gamma;  // S x T word attention
  Tensor delta;  // 1 x S sentence attention
};

inline ContentOut encode_content(const ParamMap& p, const EncodedExample& ex) {
  const auto S = ex.sentences, T = ex.steps;
  if (S == 0 || T == 0) throw InputError("empty document");
  const auto H = p.at("content.word_gru.W_h").rows();
  Tensor h = Tensor::zeros(S, H);
  std::vector<Tensor> states, scores;
  for (std::size_t t = 0; t < T; ++t) {
    auto cand = gru_step(p, "content.word_gru", ex.inputs[t], h);
    h = ag::add(h, ag::mul_col(ag::sub(cand, h), ex.step_masks[t]));
    states.push_back(h);
    auto u = ag::tanh(linear(p, "content.word_att", h));
    scores.push_back(ag::matmul(u, p.at("content.u_w")));
  }
  auto gamma = ag::softmax_rows(ag::add(ag::concat_cols(scores), ex.time_bias));
  Tensor sent;
  for (std::size_t t = 0; t < T; ++t) {
    auto term = ag::mul_col(states[t], ag::slice_cols(gamma, t, 1));
    sent = t == 0 ? term : ag::add(sent, term);
  }
  Tensor hs = Tensor::zeros(1, H);
  std::vector<Tensor> srows, sscores;
  for (std::size_t j = 0; j < S; ++j) {
    hs = gru_step(p, "content.sent_gru", ag::slice_row(sent, j), hs);
    srows.push_back(hs);
  }
  auto Hs = ag::concat_rows(srows);
  auto us = ag::tanh(linear(p, "content.sent_att", Hs));
  auto delta = ag::softmax_rows(ag::transpose(ag::matmul(us, p.at("content.u_s"))));
  return {ag::matmul(delta, Hs), gamma, delta};
}

// ---- graph encoder -----------------------------------------------------------

struct GatLayerOut {
  Tensor out;    // n x g after ELU
  Tensor alpha;  // n x n, rows sum to 1 over neighbours
};

// Single-head attention layer: e_ij = LeakyReLU(a_src . Wh_i + a_dst . Wh_j)
// over j in N(i) (self included), out_i = ELU(sum_j alpha_ij Wh_j).
inline GatLayerOut gat_layer(const ParamMap& p, const std::string& name, const Tensor& x, const Tensor& adj_bias) {
  const auto n = x.rows();
  auto wh = ag::matmul(x, p.at(name + ".U"));
  auto src = ag::matmul(wh, p.at(name + ".a_src"));
  auto dst = ag::matmul(wh, p.at(name + ".a_dst"));
  auto ones_row = Tensor::filled(1, n, 1.0), ones_col = Tensor::filled(n, 1, 1.0);
  auto e = ag::add(ag::matmul(src, ones_row), ag::matmul(ones_col, ag::transpose(dst)));
  auto alpha = ag::softmax_rows(ag::add(ag::leaky_relu(e, 0.2), adj_bias));
  return {ag::elu(ag::matmul(alpha, wh)), alpha};
}

struct GraphOut {
  Tensor x_g;  // 1 x g
  Tensor alpha1, alpha2;
};

inline GraphOut encode_graph(const ParamMap& p, const Tensor& nodes, const Tensor& adj_bias) {
  if (nodes.rows() == 0) throw InputError("empty cascade");
  auto l1 = gat_layer(p, "graph.l1", nodes, adj_bias);
  auto l2 = gat_layer(p, "graph.l2", l1.out, adj_bias);
  return {ag::mean_rows(l2.out), l1.alpha, l2.alpha};
}

// ---- latent fusion -----------------------------------------------------------

struct Posterior {
  Tensor mu;
  Tensor logvar;  // variance = exp(logvar)
};

inline Posterior posterior(const ParamMap& p, const Tensor& x_tilde) {
  return {linear(p, "fusion.mu", x_tilde), linear(p, "fusion.logvar", x_tilde)};
}

// z = mu + exp(logvar / 2) * eta for a fixed standard-normal draw eta.
inline Tensor reparameterize(const Posterior& q, const Tensor& eta) {
  return ag::add(q.mu, ag::mul(ag::exp(ag::scale(q.logvar, 0.5)), eta));
}

// Quadratic part of the Gaussian decoder NLL: ||x - decode(z)||^2 / (2 sigma^2).
inline Tensor rec_loss(const ParamMap& p, const Tensor& x_tilde, const Tensor& z, double sigma_x2 = 1.0) {
  return ag::scale(ag::sum(ag::square(ag::sub(x_tilde, linear(p, "fusion.decoder", z)))), 0.5 / sigma_x2);
}

// Half the sum of the two KL divergences between diagonal Gaussians:
// 1/4 sum[ vc/vg + vg/vc - 2 + dmu^2 (1/vc + 1/vg) ].
inline Tensor skl_loss(const Posterior& c, const Posterior& g) {
  auto dl = ag::sub(c.logvar, g.logvar);
  auto ratio = ag::add(ag::exp(dl), ag::exp(ag::neg(dl)));
  auto dmu2 = ag::square(ag::sub(c.mu, g.mu));
  auto prec = ag::add(ag::exp(ag::neg(c.logvar)), ag::exp(ag::neg(g.logvar)));
  return ag::scale(ag::sum(ag::add(ag::affine(ratio, 1.0, -2.0), ag::mul(dmu2, prec))), 0.25);
}

struct SklBreakdown {
  double value = 0.0;
  double trace_term = 0.0;  // sum vc/vg + vg/vc - 2
  double maha_c = 0.0;      // dmu^T Sigma_c^{-1} dmu
  double maha_g = 0.0;      // dmu^T Sigma_g^{-1} dmu
  double bound = 0.0;       // maha_c / 4
};

inline SklBreakdown skl_breakdown(const std::vector<double>& mu_c, const std::vector<double>& var_c,
                                  const std::vector<double>& mu_g, const std::vector<double>& var_g) {
  const auto d = mu_c.size();
  if (var_c.size() != d || mu_g.size() != d || var_g.size() != d) throw DomainError("skl: dimension mismatch");
  SklBreakdown b;
  for (std::size_t i = 0; i < d; ++i) {
    if (!(var_c[i] > 0.0) || !(var_g[i] > 0.0)) throw DomainError("skl: non-positive variance");
    const double dm = mu_c[i] - mu_g[i];
    b.trace_term += var_c[i] / var_g[i] + var_g[i] / var_c[i] - 2.0;
    b.maha_c += dm * dm / var_c[i];
    b.maha_g += dm * dm / var_g[i];
  }
  b.value = 0.25 * (b.trace_term + b.maha_c + b.maha_g);
  b.bound = 0.25 * b.maha_c;
  return b;
}

struct FuseOut {
  Tensor gate;  // 1 x 1
  Tensor o_f;
};

inline FuseOut fuse(const ParamMap& p, const Tensor& mu_c, const Tensor& mu_g) {
  auto a = ag::sigmoid(linear(p, "fusion.gate", ag::concat_cols({mu_c, mu_g})));
  return {a, ag::add(ag::scale_by(mu_c, a), ag::scale_by(mu_g, ag::affine(a, -1.0, 1.0)))};
}

// Two logits; index 0 is "fake".
inline Tensor classify_logits(const ParamMap& p, const Tensor& o_f) {
  return linear(p, "cls.out", ag::tanh(linear(p, "cls.hidden", o_f)));
}

// ---- full model ----------------------------------------------------------------

struct ForwardOut {
  ContentOut content;
  GraphOut graph;
  Posterior q_c, q_g;
  FuseOut fused;
  Tensor probs;  // 1 x 2
  Tensor cls, rec_c, rec_g, skl, total;
};

struct Noise {
  Tensor eta_c, eta_g;
  static Noise zero(std::size_t d) { return {Tensor::zeros(1, d), Tensor::zeros(1, d)}; }
  static Noise draw(std::size_t d, Rng& rng) {
    std::vector<double> a(d), b(d);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    return {Tensor::row(a), Tensor::row(b)};
  }
};

// Per-example objective: cls + lambda_rec (rec_c + rec_g) + lambda_skl skl,
// with cls = -log p(true class).
inline ForwardOut forward(const ParamMap& p, const DetectorConfig& cfg, const EncodedExample& ex, const Noise& noise) {
  ForwardOut f;
  f.content = encode_content(p, ex);
  f.graph = encode_graph(p, ex.nodes, ex.adj_bias);
  auto xt_c = linear(p, "fusion.f_c", f.content.x_c);
  auto xt_g = linear(p, "fusion.f_g", f.graph.x_g);
  f.q_c = posterior(p, xt_c);
  f.q_g = posterior(p, xt_g);
  f.rec_c = rec_loss(p, xt_c, reparameterize(f.q_c, noise.eta_c), cfg.sigma_x2);
  f.rec_g = rec_loss(p, xt_g, reparameterize(f.q_g, noise.eta_g), cfg.sigma_x2);
  f.skl = skl_loss(f.q_c, f.q_g);
  f.fused = fuse(p, f.q_c.mu, f.q_g.mu);
  auto logits = classify_logits(p, f.fused.o_f);
  f.probs = ag::softmax_rows(logits);
  const std::size_t target = ex.label == 1 ? 0 : 1;
  f.cls = ag::neg(ag::slice_cols(ag::log_softmax_rows(logits), target, 1));
  f.total = ag::add(ag::add(f.cls, ag::scale(ag::add(f.rec_c, f.rec_g), cfg.lambda_rec)),
                    ag::scale(f.skl, cfg.lambda_skl));
  return f;
}

inline double predict_fake(const ParamMap& p, const DetectorConfig& cfg, const EncodedExample& ex) {
  return forward(p, cfg, ex, Noise::zero(cfg.latent)).probs.values()[0];
}

// ---- evaluation metrics --------------------------------------------------------

struct ClassificationMetrics {
  std::size_t n = 0, tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

// Positive class is "fake".
inline ClassificationMetrics classification_metrics(const std::vector<int>& labels, const std::vector<int>& preds) {
  if (labels.size() != preds.size()) throw DomainError("label/prediction length mismatch");
  ClassificationMetrics m;
  m.n = labels.size();
  for (std::size_t i = 0; i < m.n; ++i) {
    if (preds[i] == 1 && labels[i] == 1) ++m.tp;
    else if (preds[i] == 1) ++m.fp;
    else if (labels[i] == 1) ++m.fn;
    else ++m.tn;
  }
  if (m.n) m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.n);
  if (m.tp + m.fp) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  if (m.tp + m.fn) m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

inline json to_json(const ClassificationMetrics& m) {
  return json{{"n", m.n},
              {"accuracy", m.accuracy},
              {"precision", m.precision},
              {"recall", m.recall},
              {"f1", m.f1},
              {"confusion", {{"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}}}};
}

// ---- training ------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, val_loss = 0, train_acc = 0, val_acc = 0;
  double val_cls = 0;
  double train_cls = 0, train_rec = 0, train_skl = 0;  // mean loss components
};

struct LossSummary {
  double total = 0, cls = 0, rec = 0, skl = 0, accuracy = 0;
};

struct DetectorModel {
  DetectorConfig config;
  ParamMap params;
  int best_epoch = 0;
  std::vector<EpochRecord> history;
};

// Means over `xs` evaluated at the posterior means (no sampling noise).
inline LossSummary summarize_loss(const ParamMap& p, const DetectorConfig& cfg, const std::vector<EncodedExample>& xs) {
  LossSummary s;
  if (xs.empty()) return s;
  std::size_t correct = 0;
  for (const auto& ex : xs) {
    auto f = forward(p, cfg, ex, Noise::zero(cfg.latent));
    s.total += f.total.item();
    s.cls += f.cls.item();
    s.rec += f.rec_c.item() + f.rec_g.item();
    s.skl += f.skl.item();
    const int pred = f.probs.values()[0] >= 0.5 ? 1 : 0;
    if (pred == ex.label) ++correct;
  }
  const double n = static_cast<double>(xs.size());
  s.total /= n;
  s.cls /= n;
  s.rec /= n;
  s.skl /= n;
  s.accuracy = static_cast<double>(correct) / n;
  return s;
}

inline ParamMap clone_params(const ParamMap& p) {
  ParamMap out;
  for (const auto& [k, t] : p) out[k] = Tensor::from(t.rows(), t.cols(), t.values(), true);
  return out;
}

// Minibatch Adam on the summed batch objective with early stopping on a
// validation loss evaluated at the posterior means (classification term by
// default, full objective with monitor = "total"). The returned model
// holds the best-validation parameters.
inline DetectorModel train_detector(const std::vector<EncodedExample>& train, const std::vector<EncodedExample>& val,
                                    const DetectorConfig& cfg,
                                    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  if (val.empty()) throw ConfigError("validation split is empty");
  for (const auto& ex : train)
    if (ex.nodes.cols() != cfg.node_dim) throw ConfigError("node feature width differs from node_dim");
  DetectorModel model;
  model.config = cfg;
  model.params = init_detector_params(cfg);
  std::vector<Tensor> plist;
  for (auto& [_, t] : model.params) plist.push_back(t);
  ag::AdamState adam;
  adam.lr = cfg.lr;
  Rng shuffle_rng = Rng::derive(cfg.seed, "shuffle");
  Rng noise_rng = Rng::derive(cfg.seed, "noise");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double best = std::numeric_limits<double>::infinity();
  ParamMap best_params = clone_params(model.params);
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto end = std::min(order.size(), start + cfg.batch_size);
      for (auto& t : plist) t.zero_grad();
      Tensor batch;
      for (std::size_t k = start; k < end; ++k) {
        auto f = forward(model.params, cfg, train[order[k]], Noise::draw(cfg.latent, noise_rng));
        batch = k == start ? f.total : ag::add(batch, f.total);
      }
      if (!std::isfinite(batch.item())) throw DomainError("non-finite training loss at epoch " + std::to_string(epoch));
      batch.backward();
      ag::adam_step(adam, plist);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const auto tr = summarize_loss(model.params, cfg, train);
    const auto va = summarize_loss(model.params, cfg, val);
    rec.train_loss = tr.total;
    rec.train_acc = tr.accuracy;
    rec.train_cls = tr.cls;
    rec.train_rec = tr.rec;
    rec.train_skl = tr.skl;
    rec.val_loss = va.total;
    rec.val_acc = va.accuracy;
    rec.val_cls = va.cls;
    model.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const double monitored = cfg.monitor == "cls" ? rec.val_cls : rec.val_loss;
    if (monitored < best) {
      best = monitored;
      best_params = clone_params(model.params);
      model.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model.params = std::move(best_params);
  return model;
}

inline json to_json(const EpochRecord& r) {
  return json{{"epoch", r.epoch},
              {"train_loss", r.train_loss},
              {"val_loss", r.val_loss},
              {"train_acc", r.train_acc},
              {"val_acc", r.val_acc},
              {"val_cls", r.val_cls},
              {"train_cls", r.train_cls},
              {"train_rec", r.train_rec},
              {"train_skl", r.train_skl}};
}

inline void save_detector(const std::filesystem::path& path, const DetectorModel& m) {
  ag::NamedTensors nt;
  json hist = json::array();
  for (const auto& r : m.history) hist.push_back(to_json(r));
  nt.meta = {{"format", "avoid-detector"}, {"config", to_json(m.config)}, {"best_epoch", m.best_epoch},
             {"history", hist}};
  nt.tensors = m.params;
  ag::save_tensors(path, nt);
}

inline DetectorModel load_detector(const std::filesystem::path& path) {
  auto nt = ag::load_tensors(path);
  if (nt.meta.value("format", std::string()) != "avoid-detector")
    throw ParseError(path.string(), 1, "not a detector checkpoint");
  DetectorModel m;
  m.config = detector_config_from_json(nt.meta.at("config"));
  m.best_epoch = nt.meta.value("best_epoch", 0);
  for (const auto& r : nt.meta.value("history", json::array()))
    m.history.push_back({r.at("epoch").get<int>(), r.at("train_loss").get<double>(), r.at("val_loss").get<double>(),
                         r.at("train_acc").get<double>(), r.at("val_acc").get<double>(), r.value("val_cls", 0.0), r.value("train_cls", 0.0),
                         r.value("train_rec", 0.0), r.value("train_skl", 0.0)});
  auto expected = init_detector_params(m.config);
  for (const auto& [name, t] : expected) {
    auto it = nt.tensors.find(name);
    if (it == nt.tensors.end()) throw ParseError(path.string(), 1, "missing tensor " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
      throw ParseError(path.string(), 1, "shape mismatch for " + name);
  }
  m.params = std::move(nt.tensors);
  return m;
}

// ---- confidence router ---------------------------------------------------------

struct RouterConfig {
  double tau = 0.8;
  double lr = 0.05;
  int epochs = 300;
  double l2 = 1e-3;
  std::uint64_t seed = 11;

  void validate() const {
    if (!(tau > 0.5 && tau < 1.0)) throw ConfigError("router threshold must lie in (0.5, 1)");
  }
};

// Logistic head p = sigmoid(w . e + b) over provider embeddings; p is P(fake).
struct Router {
  RouterConfig config;
  std::vector<double> w;
  double b = 0.0;

  double prob_fake(const Embedding& e) const {
    if (e.dim() != w.size()) throw DomainError("router: embedding width mismatch");
    const double s = vec::dot(w, e.values) + b;
    return s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
  }
};

inline double confidence(double p) { return std::max(p, 1.0 - p); }

struct RouteDecision {
  double p_fake = 0.5;
  double conf = 0.5;
  bool easy = false;
  int prediction = 0;  // meaningful when easy
};

inline RouteDecision route_probability(double p, double tau) {
  RouteDecision d;
  d.p_fake = p;
  d.conf = confidence(p);
  d.easy = d.conf >= tau;
  d.prediction = p >= 0.5 ? 1 : 0;
  return d;
}

inline RouteDecision route(const Router& r, const Embedding& e) { return route_probability(r.prob_fake(e), r.config.tau); }

// Full-batch Adam on mean cross-entropy plus a small L2 penalty.
inline Router train_router(const std::vector<Embedding>& xs, const std::vector<int>& ys, const RouterConfig& cfg) {
  cfg.validate();
  if (xs.empty() || xs.size() != ys.size()) throw ConfigError("router needs a nonempty labelled set");
  const auto n = xs.size(), d = xs[0].dim();
  std::vector<double> flat;
  flat.reserve(n * d);
  for (const auto& e : xs) {
    if (e.dim() != d) throw DomainError("router: embedding width mismatch");
    flat.insert(flat.end(), e.values.begin(), e.values.end());
  }
  auto X = Tensor::from(n, d, std::move(flat));
  std::vector<double> yv(n);
  for (std::size_t i = 0; i < n; ++i) yv[i] = ys[i] ? 1.0 : 0.0;
  auto Y = Tensor::from(n, 1, yv);
  auto Yc = Tensor::from(n, 1, [&] {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 - yv[i];
    return v;
  }());
  auto W = Tensor::zeros(d, 1, true);
  auto B = Tensor::zeros(1, 1, true);
  std::vector<Tensor> params{W, B};
  ag::AdamState adam;
  adam.lr = cfg.lr;
  const double eps = 1e-12;
  for (int e = 0; e < cfg.epochs; ++e) {
    W.zero_grad();
    B.zero_grad();
    auto p = ag::sigmoid(ag::add_row(ag::matmul(X, W), B));
    auto lp = ag::log(ag::affine(p, 1.0, eps));
    auto lq = ag::log(ag::affine(p, -1.0, 1.0 + eps));
    auto ce = ag::neg(ag::scale(ag::sum(ag::add(ag::mul(Y, lp), ag::mul(Yc, lq))), 1.0 / static_cast<double>(n)));
    auto loss = ag::add(ce, ag::scale(ag::sum(ag::square(W)), cfg.l2));
    loss.backward();
    ag::adam_step(adam, params);
  }
  Router r;
  r.config = cfg;
  r.w = W.values();
  r.b = B.item();
  return r;
}

inline void save_router(const std::filesystem::path& path, const Router& r) {
  ag::NamedTensors nt;
  nt.meta = {{"format", "avoid-router"},
             {"tau", r.config.tau},
             {"lr", r.config.lr},
             {"epochs", r.config.epochs},
             {"l2", r.config.l2},
             {"seed", r.config.seed}};
  nt.tensors["w"] = Tensor::row(r.w);
  nt.tensors["b"] = Tensor::scalar(r.b);
  ag::save_tensors(path, nt);
}

inline Router load_router(const std::filesystem::path& path) {
  auto nt = ag::load_tensors(path);
  if (nt.meta.value("format", std::string()) != "avoid-router") throw ParseError(path.string(), 1, "not a router checkpoint");
  Router r;
  r.config.tau = nt.meta.at("tau").get<double>();
  r.config.lr = nt.meta.value("lr", r.config.lr);
  r.config.epochs = nt.meta.value("epochs", r.config.epochs);
  r.config.l2 = nt.meta.value("l2", r.config.l2);
  r.config.seed = nt.meta.value("seed", r.config.seed);
  r.w = nt.tensors.at("w").values();
  r.b = nt.tensors.at("b").item();
  return r;
}

}  // namespace avoid
