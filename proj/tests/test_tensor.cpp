#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avoid/tensor.hpp"
#include "support.hpp"

using namespace avoid;
using namespace avoid::ag;

namespace {

Tensor rnd(std::size_t r, std::size_t c, Rng& g, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = g.uniform(lo, hi);
  return Tensor::from(r, c, v, true);
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Tensor probe(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7) - 0.05 * static_cast<double>(i);
  return sum(mul(y, Tensor::from(y.rows(), y.cols(), w)));
}

template <class F>
double check(std::map<std::string, Tensor> ps, F f) {
  return gradient_check(ps, [&] { return probe(f(ps)); }).max_rel_error;
}

}  // namespace

TEST_CASE("forward values") {
  auto a = Tensor::from(2, 2, {1, 2, 3, 4});
  auto b = Tensor::from(2, 1, {1, -1});
  CHECK(matmul(a, b).values() == std::vector<double>{-1, -1});
  CHECK(transpose(a).values() == std::vector<double>{1, 3, 2, 4});
  CHECK(add_row(a, Tensor::row({10, 20})).values() == std::vector<double>{11, 22, 13, 24});
  CHECK(mean_rows(a).values() == std::vector<double>{2, 3});
  CHECK(sum(a).item() == 10);
  CHECK(concat_cols({a, b}).values() == std::vector<double>{1, 2, 1, 3, 4, -1});
  CHECK(concat_rows({a, transpose(b)}).values() == std::vector<double>{1, 2, 3, 4, 1, -1});
  CHECK(slice_row(a, 1).values() == std::vector<double>{3, 4});
  CHECK(slice_cols(a, 1, 1).values() == std::vector<double>{2, 4});
  auto s = softmax_rows(Tensor::from(1, 3, {0, 0, -1e30}));
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[2] == 0.0);
  auto ls = log_softmax_rows(Tensor::from(1, 2, {1000, 0}));
  CHECK(ls.values()[0] == doctest::Approx(0.0));
  CHECK(ls.values()[1] == doctest::Approx(-1000.0));
  CHECK(leaky_relu(Tensor::row({-1, 2})).values() == std::vector<double>{-0.2, 2});
  CHECK(elu(Tensor::row({-1})).values()[0] == doctest::Approx(std::exp(-1.0) - 1.0));
  CHECK(sigmoid(Tensor::row({-800})).values()[0] >= 0.0);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros(3, 1)), DomainError);
  CHECK_THROWS_AS(add(a, b), DomainError);
  CHECK_THROWS_AS(a.item(), DomainError);
}

TEST_CASE("gradients of every op match central differences") {
  Rng g(17);
  std::map<std::string, Tensor> ab{{"a", rnd(3, 4, g)}, {"b", rnd(4, 2, g)}};
  CHECK(check(ab, [](auto& p) { return matmul(p["a"], p["b"]); }) < 1e-7);
  std::map<std::string, Tensor> xy{{"x", rnd(3, 4, g)}, {"y", rnd(3, 4, g)}};
  CHECK(check(xy, [](auto& p) { return add(p["x"], p["y"]); }) < 1e-7);
  CHECK(check(xy, [](auto& p) { return sub(p["x"], p["y"]); }) < 1e-7);
  CHECK(check(xy, [](auto& p) { return mul(p["x"], p["y"]); }) < 1e-7);
  CHECK(check(xy, [](auto& p) { return concat_cols({p["x"], p["y"]}); }) < 1e-7);
  CHECK(check(xy, [](auto& p) { return concat_rows({p["x"], p["y"]}); }) < 1e-7);
  std::map<std::string, Tensor> x{{"x", rnd(3, 4, g)}};
  CHECK(check(x, [](auto& p) { return affine(p["x"], 2.5, 1.0); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return exp(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return square(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return sigmoid(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return tanh(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return leaky_relu(p["x"]); }) < 1e-6);
  CHECK(check(x, [](auto& p) { return elu(p["x"]); }) < 1e-6);
  CHECK(check(x, [](auto& p) { return softmax_rows(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return log_softmax_rows(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return mean(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return mean_rows(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return transpose(p["x"]); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return slice_row(p["x"], 2); }) < 1e-7);
  CHECK(check(x, [](auto& p) { return slice_cols(p["x"], 1, 2); }) < 1e-7);
  std::map<std::string, Tensor> pos{{"x", rnd(2, 3, g, 0.5, 2.0)}};
  CHECK(check(pos, [](auto& p) { return log(p["x"]); }) < 1e-7);
  std::map<std::string, Tensor> rowb{{"x", rnd(3, 4, g)}, {"b", rnd(1, 4, g)}};
  CHECK(check(rowb, [](auto& p) { return add_row(p["x"], p["b"]); }) < 1e-7);
  std::map<std::string, Tensor> col{{"x", rnd(3, 4, g)}, {"c", rnd(3, 1, g)}};
  CHECK(check(col, [](auto& p) { return mul_col(p["x"], p["c"]); }) < 1e-7);
  std::map<std::string, Tensor> sc{{"x", rnd(3, 4, g)}, {"s", rnd(1, 1, g)}};
  CHECK(check(sc, [](auto& p) { return scale_by(p["x"], p["s"]); }) < 1e-7);
}

TEST_CASE("masked softmax sends no gradient to masked logits") {
  auto x = Tensor::from(1, 3, {0.3, -0.2, 0.0}, true);
  auto bias = Tensor::from(1, 3, {0, 0, -1e30});
  auto y = softmax_rows(add(x, bias));
  probe(y).backward();
  CHECK(x.grad()[2] == 0.0);
  CHECK(x.grad()[0] != 0.0);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  auto x = Tensor::from(1, 1, {3.0}, true);
  auto y = add(mul(x, x), x);  // x^2 + x
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("first adam step moves each weight by about lr against its gradient sign") {
  auto w = Tensor::from(1, 2, {1.0, -1.0}, true);
  sum(mul(w, Tensor::row({2.0, -0.5}))).backward();
  AdamState st;
  st.lr = 0.1;
  std::vector<Tensor> ps{w};
  adam_step(st, ps);
  CHECK(w.values()[0] == doctest::Approx(0.9));
  CHECK(w.values()[1] == doctest::Approx(-0.9));
}

TEST_CASE("adam minimises a quadratic") {
  auto w = Tensor::from(1, 3, {5.0, -3.0, 2.0}, true);
  AdamState st;
  st.lr = 0.05;
  std::vector<Tensor> ps{w};
  for (int i = 0; i < 2000; ++i) {
    w.zero_grad();
    sum(square(sub(w, Tensor::row({1.0, 2.0, 3.0})))).backward();
    adam_step(st, ps);
  }
  CHECK(w.values()[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(w.values()[1] == doctest::Approx(2.0).epsilon(1e-3));
  CHECK(w.values()[2] == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
  TempDir d("ckpt");
  NamedTensors nt;
  nt.meta = {{"format", "x"}, {"n", 3}};
  nt.tensors["a.W"] = Tensor::from(2, 2, {1.0 / 3, -0.0, 1e-300, 12345.678});
  nt.tensors["b"] = Tensor::from(1, 1, {std::nextafter(1.0, 2.0)});
  save_tensors(d / "t.ckpt", nt);
  auto back = load_tensors(d / "t.ckpt");
  CHECK(back.meta == nt.meta);
  REQUIRE(back.tensors.size() == 2);
  for (const auto& [k, t] : nt.tensors) {
    CHECK(back.tensors[k].rows() == t.rows());
    CHECK(std::memcmp(back.tensors[k].values().data(), t.values().data(), t.size() * 8) == 0);
  }
  auto bytes = read_file(d / "t.ckpt");
  CHECK(bytes.substr(0, 12) == "AVOIDCKPT 1\n");
  write_file(d / "bad.ckpt", "garbage");
  CHECK_THROWS_AS(load_tensors(d / "bad.ckpt"), ParseError);
  write_file(d / "trunc.ckpt", bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_tensors(d / "trunc.ckpt"), ParseError);
}
