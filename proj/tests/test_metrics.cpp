#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avoid/metrics.hpp"

using namespace avoid;

namespace {

CascadeGraph graph(std::vector<std::string> nodes, std::vector<std::pair<std::string, std::string>> edges,
                   std::vector<std::string> seeds) {
  CascadeGraph g;
  g.news_id = "n";
  g.nodes.insert(nodes.begin(), nodes.end());
  for (auto& [s, t] : edges) g.edges.push_back({s, t, 1, Action::Forward});
  g.seeds = std::move(seeds);
  return g;
}

// a->b, a->c, b->c, c->d seeded at a
CascadeGraph diamond() { return graph({"a", "b", "c", "d"}, {{"a", "b"}, {"a", "c"}, {"b", "c"}, {"c", "d"}}, {"a"}); }

CascadeGraph star(int leaves) {
  std::vector<std::string> nodes{"s"};
  std::vector<std::pair<std::string, std::string>> edges;
  for (int i = 0; i < leaves; ++i) {
    nodes.push_back("l" + std::to_string(i));
    edges.emplace_back("s", nodes.back());
  }
  return graph(nodes, edges, {"s"});
}

}  // namespace

TEST_CASE("hand-computed structure of a small cascade") {
  auto g = diamond();
  CHECK(cascade_depth(g) == 2);
  CHECK(density(g) == doctest::Approx(1.0 / 3.0));
  CHECK(avg_degree(g) == doctest::Approx(1.0));
  CHECK(avg_degree(g, DegreeConvention::In) == doctest::Approx(1.0));
  CHECK(avg_degree(g, DegreeConvention::Total) == doctest::Approx(2.0));
  CHECK(structural_virality(g) == doctest::Approx(8.0 / 6.0));
  CHECK(clustering(g) == doctest::Approx(7.0 / 12.0));
  CHECK(node_degrees(g, DegreeConvention::Out) == std::vector<std::size_t>{2, 1, 1, 0});
  CHECK(node_degrees(g, DegreeConvention::In) == std::vector<std::size_t>{0, 1, 2, 1});
}

TEST_CASE("star cascade") {
  auto g = star(4);
  CHECK(cascade_depth(g) == 1);
  CHECK(structural_virality(g) == doctest::Approx(1.6));
  CHECK(clustering(g) == 0.0);
  CHECK(density(g) == doctest::Approx(4.0 / 20.0));
}

TEST_CASE("depth follows the shortest route from any seed") {
  // chain a->b->c->d plus shortcut a->d; second seed at c
  auto g = graph({"a", "b", "c", "d"}, {{"a", "b"}, {"b", "c"}, {"c", "d"}, {"a", "d"}}, {"a"});
  CHECK(cascade_depth(g) == 2);
  g.seeds.push_back("c");
  CHECK(cascade_depth(g) == 1);
}

TEST_CASE("degenerate graphs") {
  auto single = graph({"a"}, {}, {"a"});
  auto s = cascade_stats(single);
  CHECK(s.cascade_depth == 0.0);
  CHECK(s.avg_degree == 0.0);
  CHECK(s.density == 0.0);
  CHECK(s.structural_virality == 0.0);
  CHECK(s.clustering == 0.0);
}

TEST_CASE("duplicate arcs and self-loops are ignored") {
  auto g = graph({"a", "b"}, {{"a", "b"}, {"a", "b"}, {"b", "b"}}, {"a"});
  CHECK(density(g) == doctest::Approx(0.5));
  CHECK(avg_degree(g) == doctest::Approx(0.5));
}

TEST_CASE("edges outside the node set are rejected") {
  auto g = graph({"a"}, {{"a", "z"}}, {"a"});
  CHECK_THROWS_AS(density(g), IntegrityError);
}

TEST_CASE("disconnected components weight structural virality by pairs") {
  // a-b (1 pair, distance 1) and c-d-e path (3 pairs, distances 1,1,2)
  auto g = graph({"a", "b", "c", "d", "e"}, {{"a", "b"}, {"c", "d"}, {"d", "e"}}, {"a", "c"});
  CHECK(structural_virality(g) == doctest::Approx(5.0 / 4.0));
}

TEST_CASE("mean stats average per cascade") {
  auto m = mean_stats({diamond(), star(4)});
  CHECK(m.cascade_depth == doctest::Approx(1.5));
  CHECK(m.structural_virality == doctest::Approx((8.0 / 6.0 + 1.6) / 2.0));
  CHECK_THROWS_AS(mean_stats({}), InputError);
}

TEST_CASE("jensen-shannon identities") {
  std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(jsd(p, p) == doctest::Approx(0.0));
  CHECK(jsd({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(1.0));
  CHECK(jsd({1.0, 0.0}, {0.5, 0.5}) == doctest::Approx(0.31127812445913283));
  CHECK(jsd({1.0, 0.0}, {0.5, 0.5}) == doctest::Approx(jsd({0.5, 0.5}, {1.0, 0.0})));
  CHECK(jsd({1.0}, {1.0, 0.0, 0.0}) == doctest::Approx(0.0));
}

TEST_CASE("degree distribution pools nodes across cascades") {
  auto h = degree_distribution({diamond(), star(4)}, DegreeConvention::Out);
  // diamond 2,1,1,0 and star 4,0,0,0,0
  REQUIRE(h.size() == 5);
  CHECK(h[0] == doctest::Approx(5.0 / 9.0));
  CHECK(h[1] == doctest::Approx(2.0 / 9.0));
  CHECK(h[2] == doctest::Approx(1.0 / 9.0));
  CHECK(h[3] == 0.0);
  CHECK(h[4] == doctest::Approx(1.0 / 9.0));
  CHECK(degree_jsd({diamond()}, {diamond()}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(degree_jsd({}, {diamond()}), InputError);
}

TEST_CASE("behaviour report") {
  auto g1 = diamond();
  g1.events.push_back({"b", 1, Action::Comment, std::string("yes"), Stance::Pos});
  g1.events.push_back({"c", 1, Action::Comment, std::string("no"), Stance::Neg});
  g1.events.push_back({"x", 1, Action::FactCheck, std::nullopt, std::nullopt});
  auto g2 = star(2);
  g2.events.push_back({"l0", 1, Action::Comment, std::string("hm"), Stance::Neu});
  g2.events.push_back({"l1", 1, Action::Comment, std::string("ok"), Stance::Pos});

  auto b = behavior_report({g1, g2}, {"a", "l0"});
  // g1: roster verifier a plus fact-checker x; g2: l0
  CHECK(b.verifier_count == doctest::Approx(1.5));
  CHECK(b.comments == 4);
  REQUIRE(b.stance_defined);
  CHECK(b.pos == doctest::Approx(50.0));
  CHECK(b.neu == doctest::Approx(25.0));
  CHECK(b.neg == doctest::Approx(25.0));

  auto none = behavior_report({star(3)}, {});
  CHECK_FALSE(none.stance_defined);
  CHECK(to_json(none).contains("stance") == false);
}

TEST_CASE("published references") {
  const auto* p = find_reference("politifact");
  REQUIRE(p);
  CHECK(p->real.cascade_depth == 4.203);
  CHECK(p->virt.avg_degree == 2.163);
  CHECK(p->jsd == 0.078);
  CHECK(p->verifier_real == 4.88);
  CHECK(p->stance_virt[2] == 31.5);
  const auto* g = find_reference("gossipcop");
  REQUIRE(g);
  CHECK(g->real.density == 0.051);
  CHECK(g->virt.clustering == 0.065);
  CHECK(g->jsd == 0.104);
  CHECK(g->stance_real[0] == 75.8);
  CHECK(find_reference("twitter") == nullptr);
}

TEST_CASE("comparison report and rendering") {
  CascadeStats real{2.0, 1.0, 0.5, 1.5, 0.0};
  CascadeStats virt{3.0, 1.0, 0.25, 1.5, 0.1};
  auto rep = compare_report(real, virt, 0.125, find_reference("gossipcop"));
  REQUIRE(rep.rows.size() == 5);
  CHECK(rep.rows[0].delta == doctest::Approx(1.0));
  CHECK(*rep.rows[0].rel == doctest::Approx(0.5));
  CHECK(*rep.rows[2].rel == doctest::Approx(-0.5));
  CHECK_FALSE(rep.rows[4].rel.has_value());
  CHECK(*rep.rows[0].ref_real == 3.086);

  auto table = render_table(rep);
  CHECK(table.find("cascade_depth") != std::string::npos);
  CHECK(table.find("+1.000") != std::string::npos);
  CHECK(table.find("50.000%") != std::string::npos);
  CHECK(table.find("0.104") != std::string::npos);

  auto j = to_json(rep);
  CHECK(j["rows"][4]["relative"].is_null());
  CHECK(j["degree_jsd"].get<double>() == 0.125);
  CHECK(j["reference_degree_jsd"].get<double>() == 0.104);

  auto bare = compare_report(real, virt);
  CHECK(render_table(bare).find("degree_jsd") == std::string::npos);
  CHECK(to_json(bare)["degree_jsd"].is_null());
}

TEST_CASE("degree convention parsing") {
  CHECK(parse_degree_convention("in") == DegreeConvention::In);
  CHECK(std::string(to_string(DegreeConvention::Total)) == "total");
  CHECK_THROWS_AS(parse_degree_convention("both"), ConfigError);
}
