#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avoid/detector.hpp"
#include "support.hpp"

using namespace avoid;

namespace {

DetectorConfig tiny() {
  DetectorConfig c;
  c.token_dim = 6;
  c.hidden = 5;
  c.gat_hidden = 4;
  c.latent = 3;
  c.cls_hidden = 4;
  c.node_dim = 4;
  return c;
}

std::vector<double> feature_of(const std::string& id) {
  Rng r(fnv1a64(id, 1));
  std::vector<double> v(4);
  for (auto& x : v) x = r.normal();
  return v;
}

CascadeGraph chain(const std::vector<std::string>& ids) {
  CascadeGraph g;
  g.news_id = "n";
  g.nodes.insert(ids.begin(), ids.end());
  g.seeds = {ids[0]};
  for (std::size_t i = 1; i < ids.size(); ++i) g.edges.push_back({ids[i - 1], ids[i], int(i), Action::Forward});
  return g;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("gru step matches the gate equations") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  Rng r(4);
  std::vector<double> xv(cfg.token_dim), hv(cfg.hidden);
  for (auto& v : xv) v = r.normal();
  for (auto& v : hv) v = r.normal(0, 0.5);
  auto out = gru_step(p, "content.word_gru", Tensor::row(xv), Tensor::row(hv)).values();
  const auto H = cfg.hidden;
  auto& Wi = p["content.word_gru.W_i"];
  auto& Wh = p["content.word_gru.W_h"];
  auto gate = [&](const Tensor& W, const std::vector<double>& v, std::size_t col) {
    double s = 0;
    for (std::size_t k = 0; k < v.size(); ++k) s += v[k] * W.at(k, col);
    return s;  // biases start at zero
  };
  for (std::size_t j = 0; j < H; ++j) {
    const double rj = sigm(gate(Wi, xv, j) + gate(Wh, hv, j));
    const double zj = sigm(gate(Wi, xv, H + j) + gate(Wh, hv, H + j));
    const double nj = std::tanh(gate(Wi, xv, 2 * H + j) + rj * gate(Wh, hv, 2 * H + j));
    CHECK(out[j] == doctest::Approx((1 - zj) * nj + zj * hv[j]).epsilon(1e-12));
  }
}

TEST_CASE("graph attention coefficients match a hand computation") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  TokenEmbedder tok(cfg.token_dim, 1);
  // star: a-b, a-c; b and c are not neighbours
  CascadeGraph g;
  g.news_id = "n";
  g.nodes = {"a", "b", "c"};
  g.seeds = {"a"};
  g.edges = {{"a", "b", 1, Action::Forward}, {"a", "c", 1, Action::Forward}};
  auto ex = encode_example("n", {{"w"}}, g, feature_of, 0, tok);
  auto layer = gat_layer(p, "graph.l1", ex.nodes, ex.adj_bias);
  const auto& U = p["graph.l1.U"];
  const auto& as = p["graph.l1.a_src"];
  const auto& ad = p["graph.l1.a_dst"];
  std::vector<std::vector<double>> wh(3, std::vector<double>(cfg.gat_hidden, 0));
  const char* ids[] = {"a", "b", "c"};
  for (int i = 0; i < 3; ++i) {
    auto f = feature_of(ids[i]);
    for (std::size_t k = 0; k < cfg.gat_hidden; ++k)
      for (std::size_t m = 0; m < 4; ++m) wh[i][k] += f[m] * U.at(m, k);
  }
  auto score = [&](int i, int j) {
    double s = 0;
    for (std::size_t k = 0; k < cfg.gat_hidden; ++k) s += as.values()[k] * wh[i][k] + ad.values()[k] * wh[j][k];
    return s > 0 ? s : 0.2 * s;
  };
  const std::vector<std::vector<int>> nb{{0, 1, 2}, {0, 1}, {0, 2}};
  for (int i = 0; i < 3; ++i) {
    double z = 0;
    for (int j : nb[i]) z += std::exp(score(i, j));
    for (int j = 0; j < 3; ++j) {
      const bool is_nb = std::find(nb[i].begin(), nb[i].end(), j) != nb[i].end();
      const double want = is_nb ? std::exp(score(i, j)) / z : 0.0;
      CHECK(layer.alpha.at(i, j) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("graph encoding is invariant to node relabelling") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  TokenEmbedder tok(cfg.token_dim, 1);
  std::map<std::string, std::string> rename{{"a", "z9"}, {"b", "b0"}, {"c", "m5"}, {"d", "a1"}};
  auto g1 = chain({"a", "b", "c", "d"});
  auto g2 = chain({"z9", "b0", "m5", "a1"});
  auto f1 = [&](const std::string& id) { return feature_of(id); };
  auto f2 = [&](const std::string& id) {
    for (auto& [k, v] : rename)
      if (v == id) return feature_of(k);
    return feature_of(id);
  };
  auto e1 = encode_example("n", {{"x"}}, g1, f1, 0, tok);
  auto e2 = encode_example("n", {{"x"}}, g2, f2, 0, tok);
  auto x1 = encode_graph(p, e1.nodes, e1.adj_bias).x_g.values();
  auto x2 = encode_graph(p, e2.nodes, e2.adj_bias).x_g.values();
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(x1[i] == doctest::Approx(x2[i]).epsilon(1e-12));
}

TEST_CASE("word attention ignores padding") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  TokenEmbedder tok(cfg.token_dim, 1);
  auto g = chain({"a"});
  auto ex = encode_example("n", {{"one", "two", "three", "four"}, {"five"}}, g, feature_of, 0, tok);
  CHECK(ex.steps == 4);
  auto c = encode_content(p, ex);
  CHECK(c.gamma.at(1, 0) == doctest::Approx(1.0));
  for (std::size_t t = 1; t < 4; ++t) CHECK(c.gamma.at(1, t) == 0.0);
  double row0 = 0;
  for (std::size_t t = 0; t < 4; ++t) row0 += c.gamma.at(0, t);
  CHECK(row0 == doctest::Approx(1.0));
  // a single sentence gets all the sentence attention
  auto solo = encode_example("n", {{"five"}}, g, feature_of, 0, tok);
  CHECK(encode_content(p, solo).delta.at(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("empty inputs are rejected") {
  TokenEmbedder tok(4, 1);
  CHECK_THROWS_AS(encode_example("n", {{}}, chain({"a"}), feature_of, 0, tok), InputError);
  CascadeGraph empty;
  CHECK_THROWS_AS(encode_example("n", {{"x"}}, empty, feature_of, 0, tok), InputError);
}

TEST_CASE("symmetric KL equals the mean of the two directed divergences") {
  Rng r(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + r.below(6);
    std::vector<double> mc(d), vc(d), mg(d), vg(d);
    for (std::size_t i = 0; i < d; ++i) {
      mc[i] = r.normal();
      mg[i] = r.normal();
      vc[i] = std::exp(r.uniform(-2, 2));
      vg[i] = std::exp(r.uniform(-2, 2));
    }
    auto kl = [&](const auto& m1, const auto& v1, const auto& m2, const auto& v2) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i)
        s += 0.5 * (std::log(v2[i] / v1[i]) + (v1[i] + (m1[i] - m2[i]) * (m1[i] - m2[i])) / v2[i] - 1);
      return s;
    };
    auto b = skl_breakdown(mc, vc, mg, vg);
    CHECK(b.value == doctest::Approx(0.5 * (kl(mc, vc, mg, vg) + kl(mg, vg, mc, vc))).epsilon(1e-12));
    CHECK(b.value >= b.bound);

    std::vector<double> lc(d), lg(d);
    for (std::size_t i = 0; i < d; ++i) {
      lc[i] = std::log(vc[i]);
      lg[i] = std::log(vg[i]);
    }
    auto t_skl = skl_loss({Tensor::row(mc), Tensor::row(lc)}, {Tensor::row(mg), Tensor::row(lg)});
    CHECK(t_skl.item() == doctest::Approx(b.value).epsilon(1e-12));
  }
  CHECK_THROWS_AS(skl_breakdown({0}, {0.0}, {0}, {1.0}), DomainError);
  CHECK(skl_breakdown({1, 2}, {1, 3}, {1, 2}, {1, 3}).value == 0.0);
}

TEST_CASE("gate output is a convex combination") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  auto mc = Tensor::row({1, 2, 3}), mg = Tensor::row({-1, 0, 5});
  auto f = fuse(p, mc, mg);
  const double a = f.gate.item();
  CHECK(a > 0.0);
  CHECK(a < 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(f.o_f.values()[i] == doctest::Approx(a * mc.values()[i] + (1 - a) * mg.values()[i]));
}

TEST_CASE("forward objective adds the weighted terms") {
  auto cfg = tiny();
  cfg.lambda_rec = 0.3;
  cfg.lambda_skl = 0.7;
  auto p = init_detector_params(cfg);
  TokenEmbedder tok(cfg.token_dim, 1);
  auto ex = encode_example("n", {{"a", "b"}, {"c"}}, chain({"u", "v", "w"}), feature_of, 1, tok);
  Rng r(2);
  auto f = forward(p, cfg, ex, Noise::draw(cfg.latent, r));
  CHECK(f.total.item() ==
        doctest::Approx(f.cls.item() + 0.3 * (f.rec_c.item() + f.rec_g.item()) + 0.7 * f.skl.item()));
  CHECK(f.cls.item() == doctest::Approx(-std::log(f.probs.values()[0])));
  CHECK(f.probs.values()[0] + f.probs.values()[1] == doctest::Approx(1.0));
}

TEST_CASE("full-model gradients pass a finite-difference check") {
  auto cfg = tiny();
  auto p = init_detector_params(cfg);
  TokenEmbedder tok(cfg.token_dim, 1);
  auto ex = encode_example("n", {{"a", "b", "c"}, {"d"}}, chain({"u", "v", "w"}), feature_of, 0, tok);
  Rng r(5);
  auto noise = Noise::draw(cfg.latent, r);
  auto res = ag::gradient_check(p, [&] { return forward(p, cfg, ex, noise).total; });
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("classification metrics on a hand-made confusion matrix") {
  auto m = classification_metrics({1, 1, 1, 0, 0}, {1, 0, 1, 1, 0});
  CHECK(m.tp == 2);
  CHECK(m.fn == 1);
  CHECK(m.fp == 1);
  CHECK(m.tn == 1);
  CHECK(m.accuracy == doctest::Approx(0.6));
  CHECK(m.precision == doctest::Approx(2.0 / 3));
  CHECK(m.recall == doctest::Approx(2.0 / 3));
  CHECK(m.f1 == doctest::Approx(2.0 / 3));
  CHECK_THROWS_AS(classification_metrics({1}, {}), DomainError);
}

TEST_CASE("training learns a separable toy task and checkpoints reload") {
  auto cfg = tiny();
  cfg.lr = 1e-2;
  cfg.max_epochs = 40;
  cfg.batch_size = 4;
  TokenEmbedder tok(cfg.token_dim, 3);
  std::vector<EncodedExample> tr, va;
  for (int i = 0; i < 24; ++i) {
    const int y = i % 2;
    std::vector<std::string> s = y ? std::vector<std::string>{"shocking", "hoax", "w" + std::to_string(i % 5)}
                                   : std::vector<std::string>{"officials", "report", "w" + std::to_string(i % 5)};
    auto ex = encode_example("n" + std::to_string(i), {s}, chain({"a", "b"}), feature_of, y, tok);
    (i < 16 ? tr : va).push_back(ex);
  }
  int epochs_seen = 0;
  auto m = train_detector(tr, va, cfg, [&](const EpochRecord&) { ++epochs_seen; });
  CHECK(epochs_seen == static_cast<int>(m.history.size()));
  CHECK(m.best_epoch >= 1);
  CHECK(summarize_loss(m.params, cfg, va).accuracy == 1.0);

  TempDir d("det");
  save_detector(d / "m.ckpt", m);
  auto back = load_detector(d / "m.ckpt");
  CHECK(back.best_epoch == m.best_epoch);
  CHECK(back.history.size() == m.history.size());
  for (const auto& ex : va) CHECK(predict_fake(back.params, back.config, ex) == predict_fake(m.params, cfg, ex));

  CHECK_THROWS_AS(train_detector({}, va, cfg), ConfigError);
  CHECK_THROWS_AS(train_detector(tr, {}, cfg), ConfigError);
  auto wrong = cfg;
  wrong.node_dim = 9;
  CHECK_THROWS_AS(train_detector(tr, va, wrong), ConfigError);
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
  auto cfg = tiny();
  cfg.lr = 1e-2;
  cfg.max_epochs = 50;
  cfg.patience = 3;
  TokenEmbedder tok(cfg.token_dim, 3);
  // validation labels contradict training labels, so validation only gets worse
  std::vector<EncodedExample> tr, va;
  for (int i = 0; i < 4; ++i) {
    tr.push_back(encode_example("n", {{"w"}}, chain({"a"}), feature_of, 1, tok));
    va.push_back(encode_example("n", {{"w"}}, chain({"a"}), feature_of, 0, tok));
  }
  auto m = train_detector(tr, va, cfg);
  CHECK(m.best_epoch == 1);
  CHECK(m.history.size() == 4);
  for (std::size_t i = 1; i < m.history.size(); ++i) CHECK(m.history[i].val_cls > m.history[0].val_cls);
}

TEST_CASE("router routes by confidence against tau") {
  auto d = route_probability(0.9, 0.8);
  CHECK(d.easy);
  CHECK(d.prediction == 1);
  CHECK(route_probability(0.2, 0.8).easy);
  CHECK(route_probability(0.2, 0.8).prediction == 0);
  CHECK_FALSE(route_probability(0.7, 0.8).easy);
  CHECK(route_probability(0.8, 0.8).easy);  // conf == tau counts as easy
  RouterConfig bad;
  bad.tau = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.tau = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("router fits a linearly separable set and round-trips") {
  std::vector<Embedding> xs;
  std::vector<int> ys;
  Rng r(1);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    xs.push_back(Embedding({y ? 1.0 + r.uniform(0, 0.2) : -1.0 - r.uniform(0, 0.2), r.normal(0, 0.1)}));
    ys.push_back(y);
  }
  auto rt = train_router(xs, ys, {});
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK((rt.prob_fake(xs[i]) >= 0.5) == (ys[i] == 1));
  TempDir d("router");
  save_router(d / "r.ckpt", rt);
  auto back = load_router(d / "r.ckpt");
  CHECK(back.w == rt.w);
  CHECK(back.b == rt.b);
  CHECK(back.config.tau == rt.config.tau);
  CHECK_THROWS_AS(rt.prob_fake(Embedding(std::vector<double>{1.0})), DomainError);
  CHECK_THROWS_AS(load_detector(d / "r.ckpt"), ParseError);
}
