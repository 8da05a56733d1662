#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avoid/theory.hpp"

using namespace avoid;
using namespace avoid::theory;

TEST_CASE("solve inverts matvec") {
  Rng rng(3);
  for (std::size_t d : {1u, 2u, 5u, 9u}) {
    auto W = random_mixing(d, rng);
    std::vector<double> b(d);
    for (auto& x : b) x = rng.normal();
    auto x = solve(W, b);
    auto back = matvec(W, x);
    for (std::size_t i = 0; i < d; ++i) CHECK(back[i] == doctest::Approx(b[i]).epsilon(1e-10));
  }
}

TEST_CASE("solve needs pivoting and rejects singular systems") {
  Matrix W{{0.0, 1.0}, {1.0, 0.0}};
  auto x = solve(W, {2.0, 3.0});
  CHECK(x[0] == doctest::Approx(3.0));
  CHECK(x[1] == doctest::Approx(2.0));
  CHECK_THROWS_AS(solve({{1.0, 2.0}, {2.0, 4.0}}, {1.0, 1.0}), DomainError);
}

TEST_CASE("reconstruction loss is quadratic in the missing signal") {
  // the decoder undoes W, so the residual is (1 - eta) s
  Rng rng(11);
  auto m = SyntheticNoiseModel::random(4, 16, rng);
  double s2 = 0.0;
  for (const auto& s : m.s)
    for (double v : s) s2 += v * v;
  for (double eta : {0.0, 0.3, 0.75, 1.0})
    CHECK(rec_loss_at(m, eta) == doctest::Approx((1.0 - eta) * (1.0 - eta) * s2 / 2.0).epsilon(1e-9));
  CHECK(rec_loss_at(m, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("latent gap does not depend on the shared signal") {
  Rng rng(5);
  auto m = SyntheticNoiseModel::random(3, 2, rng);
  std::vector<double> diff(3);
  for (std::size_t k = 0; k < 3; ++k) diff[k] = m.eps_c[0][k] - m.eps_g[0][k];
  auto expect = matvec(m.W, diff);
  for (const auto& s : m.s) {
    auto c = m.latent_mean(s, m.eps_c[0], 0.4);
    auto g = m.latent_mean(s, m.eps_g[0], 0.4);
    for (std::size_t k = 0; k < 3; ++k) CHECK(c[k] - g[k] == doctest::Approx(expect[k]));
  }
}

TEST_CASE("property reports") {
  auto b = check_skl_bound(200, 8, 7);
  CHECK(b.trials == 200);
  CHECK(b.violations == 0);
  CHECK(b.min_margin >= -1e-12);

  auto e = check_eta_sweep(10, 7);
  CHECK(e.argmin_at_one == 10);
  CHECK(e.strictly_decreasing == 10);
  REQUIRE(e.etas.size() == 11);
  CHECK(e.etas.front() == 0.0);
  CHECK(e.etas.back() == 1.0);
  CHECK(e.first_curve.size() == 11);

  auto c = check_cancellation(10, 7);
  CHECK(c.passed);
  CHECK(c.max_abs_diff <= 1e-12);
}

TEST_CASE("reports are reproducible") {
  auto a = check_eta_sweep(3, 99), b = check_eta_sweep(3, 99);
  CHECK(a.first_curve == b.first_curve);
  CHECK(check_skl_bound(50, 4, 1).min_margin == check_skl_bound(50, 4, 1).min_margin);
}
