#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "avoid/detector.hpp"
#include "avoid/random.hpp"

namespace avoid::theory {

using Matrix = std::vector<std::vector<double>>;

inline std::vector<double> matvec(const Matrix& W, const std::vector<double>& x) {
  std::vector<double> y(W.size(), 0.0);
  for (std::size_t i = 0; i < W.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += W[i][j] * x[j];
  return y;
}

// Solves W x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> solve(Matrix W, std::vector<double> b) {
  const auto n = W.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(W[r][c]) > std::abs(W[piv][c])) piv = r;
    if (std::abs(W[piv][c]) < 1e-12) throw DomainError("solve: singular matrix");
    std::swap(W[c], W[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = W[r][c] / W[c][c];
      for (std::size_t k = c; k < n; ++k) W[r][k] -= f * W[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= W[i][k] * x[k];
    x[i] = s / W[i][i];
  }
  return x;
}

// Well-conditioned random mixing map: identity plus a scaled Gaussian matrix.
inline Matrix random_mixing(std::size_t d, Rng& rng) {
  Matrix W(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) W[i][j] = (i == j ? 1.0 : 0.0) + rng.normal(0.0, 0.3 / std::sqrt(double(d)));
  return W;
}

// Shared signal s plus independent modality noise, mixed by W.
struct SyntheticNoiseModel {
  std::size_t dim = 4;
  std::size_t samples = 32;
  double noise_scale = 0.5;
  double sigma_x2 = 1.0;
  Matrix W;
  std::vector<std::vector<double>> s, eps_c, eps_g;

  static SyntheticNoiseModel random(std::size_t dim, std::size_t samples, Rng& rng, double noise_scale = 0.5) {
    SyntheticNoiseModel m;
    m.dim = dim;
    m.samples = samples;
    m.noise_scale = noise_scale;
    m.W = random_mixing(dim, rng);
    auto draw = [&](double sd) {
      std::vector<double> v(dim);
      for (auto& x : v) x = rng.normal(0.0, sd);
      return v;
    };
    for (std::size_t i = 0; i < samples; ++i) {
      m.s.push_back(draw(1.0));
      m.eps_c.push_back(draw(noise_scale));
      m.eps_g.push_back(draw(noise_scale));
    }
    return m;
  }

  // mu(eta) = W (eta s + eps)
  std::vector<double> latent_mean(const std::vector<double>& s_i, const std::vector<double>& e, double eta) const {
    std::vector<double> v(dim);
    for (std::size_t k = 0; k < dim; ++k) v[k] = eta * s_i[k] + e[k];
    return matvec(W, v);
  }
};

// Reconstruction loss of x = s + eps_c through the encoder mean mu(eta) and the
// linear Gaussian decoder W^{-1}.
inline double rec_loss_at(const SyntheticNoiseModel& m, double eta) {
  double total = 0.0;
  for (std::size_t i = 0; i < m.samples; ++i) {
    auto mu = m.latent_mean(m.s[i], m.eps_c[i], eta);
    auto xhat = solve(m.W, mu);
    for (std::size_t k = 0; k < m.dim; ++k) {
      const double r = (m.s[i][k] + m.eps_c[i][k]) - xhat[k];
      total += r * r;
    }
  }
  return total / (2.0 * m.sigma_x2);
}

struct SklBoundReport {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double min_margin = std::numeric_limits<double>::infinity();  // skl - bound
  double seconds = 0.0;
};

inline SklBoundReport check_skl_bound(std::size_t trials, std::size_t max_dim, std::uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::derive(seed, "skl-bound");
  SklBoundReport r;
  r.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto d = 1 + static_cast<std::size_t>(rng.below(max_dim));
    std::vector<double> mc(d), vc(d), mg(d), vg(d);
    for (std::size_t k = 0; k < d; ++k) {
      mc[k] = rng.normal(0.0, 2.0);
      mg[k] = rng.normal(0.0, 2.0);
      vc[k] = std::exp(rng.uniform(-3.0, 3.0));
      vg[k] = std::exp(rng.uniform(-3.0, 3.0));
    }
    if (t % 10 == 0) mg = mc;  // exercise the zero-gap case too
    auto b = skl_breakdown(mc, vc, mg, vg);
    const double margin = b.value - b.bound;
    r.min_margin = std::min(r.min_margin, margin);
    if (b.value < b.bound - 1e-12 * std::max(1.0, b.bound)) ++r.violations;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct EtaSweepReport {
  std::size_t instances = 0;
  std::size_t argmin_at_one = 0;
  std::size_t strictly_decreasing = 0;
  std::vector<double> etas;
  std::vector<double> first_curve;  // L_rec over etas for instance 0
  double seconds = 0.0;
};

inline EtaSweepReport check_eta_sweep(std::size_t instances, std::uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::derive(seed, "eta-sweep");
  EtaSweepReport r;
  r.instances = instances;
  for (int k = 0; k <= 10; ++k) r.etas.push_back(k / 10.0);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto d = 2 + static_cast<std::size_t>(rng.below(7));
    auto m = SyntheticNoiseModel::random(d, 32, rng);
    std::vector<double> curve;
    for (double eta : r.etas) curve.push_back(rec_loss_at(m, eta));
    if (i == 0) r.first_curve = curve;
    const auto best = static_cast<std::size_t>(std::min_element(curve.begin(), curve.end()) - curve.begin());
    if (best == curve.size() - 1) ++r.argmin_at_one;
    bool dec = true;
    for (std::size_t k = 1; k < curve.size(); ++k)
      if (!(curve[k] < curve[k - 1])) dec = false;
    if (dec) ++r.strictly_decreasing;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct CancellationReport {
  std::size_t instances = 0;
  double max_abs_diff = 0.0;  // over instances, of (mu_c - mu_g)|s1 - (mu_c - mu_g)|s2
  bool passed = false;
};

inline CancellationReport check_cancellation(std::size_t instances, std::uint64_t seed, double tol = 1e-12) {
  Rng rng = Rng::derive(seed, "cancellation");
  CancellationReport r;
  r.instances = instances;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto d = 2 + static_cast<std::size_t>(rng.below(7));
    auto m = SyntheticNoiseModel::random(d, 2, rng);
    const double eta = rng.uniform(0.1, 1.0);
    auto gap = [&](const std::vector<double>& s) {
      auto c = m.latent_mean(s, m.eps_c[0], eta);
      auto g = m.latent_mean(s, m.eps_g[0], eta);
      for (std::size_t k = 0; k < d; ++k) c[k] -= g[k];
      return c;
    };
    auto g1 = gap(m.s[0]), g2 = gap(m.s[1]);
    for (std::size_t k = 0; k < d; ++k) r.max_abs_diff = std::max(r.max_abs_diff, std::abs(g1[k] - g2[k]));
  }
  r.passed = r.max_abs_diff <= tol;
  return r;
}

}  // namespace avoid::theory
