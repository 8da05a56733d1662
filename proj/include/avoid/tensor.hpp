#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "avoid/error.hpp"
#include "avoid/random.hpp"

// Rank-2 dense tensors of doubles with a dynamic reverse-mode tape. Vectors
// are 1 x n rows. Every op returns a fresh node; values of existing nodes are
// never modified while a graph is alive.
namespace avoid::ag {

struct Node {
  std::size_t rows = 0, cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(std::size_t r, std::size_t c, bool requires_grad = false) {
    return from(r, c, std::vector<double>(r * c, 0.0), requires_grad);
  }
  static Tensor filled(std::size_t r, std::size_t c, double v) { return from(r, c, std::vector<double>(r * c, v)); }
  static Tensor scalar(double v) { return from(1, 1, {v}); }
  static Tensor from(std::size_t r, std::size_t c, std::vector<double> v, bool requires_grad = false) {
    if (v.size() != r * c) throw DomainError("tensor value length does not match shape");
    auto n = std::make_shared<Node>();
    n->rows = r;
    n->cols = c;
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor row(const std::vector<double>& v) { return from(1, v.size(), v); }
  static Tensor identity(std::size_t n) {
    auto t = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) t.n_->value[i * n + i] = 1.0;
    return t;
  }
  // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
  static Tensor glorot(std::size_t r, std::size_t c, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(r + c));
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.uniform(-a, a);
    return from(r, c, std::move(v), true);
  }

  bool defined() const { return static_cast<bool>(n_); }
  std::size_t rows() const { return n_->rows; }
  std::size_t cols() const { return n_->cols; }
  std::size_t size() const { return n_->value.size(); }
  const std::vector<double>& values() const { return n_->value; }
  std::vector<double>& mutable_values() { return n_->value; }  // leaves only, between passes
  double at(std::size_t i, std::size_t j) const { return n_->value[i * n_->cols + j]; }
  double item() const {
    if (size() != 1) throw DomainError("item() on a non-scalar tensor");
    return n_->value[0];
  }
  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }
  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

  // Reverse-topological accumulation from this scalar.
  void backward() const {
    if (size() != 1) throw DomainError("backward() needs a scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (auto* node : order)
      if (node->backward) node->ensure_grad();
    n_->ensure_grad();
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward) (*it)->backward(**it);
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make(std::size_t r, std::size_t c, std::vector<double> v, std::vector<Tensor> parents,
                   std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->rows = r;
  n->cols = c;
  n->value = std::move(v);
  for (auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

inline void add_into(Node* p, const std::vector<double>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DomainError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.values()[i]);
  auto pa = a.ptr();
  return make(a.rows(), a.cols(), std::move(v), {a}, [pa, dfdx](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * dfdx(pa->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw DomainError("matmul: inner dimensions differ");
  const auto n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> v(n * m, 0.0);
  const auto& A = a.values();
  const auto& B = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) v[i * m + j] += x * B[p * m + j];
    }
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make(n, m, std::move(v), {a, b}, [pa, pb, n, k, m](Node& self) {
    const auto& G = self.grad;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += G[i * m + j] * pb->value[p * m + j];
          pa->grad[i * k + p] += s;
        }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = pa->value[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) pb->grad[p * m + j] += x * G[i * m + j];
        }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make(a.rows(), a.cols(), std::move(v), {a, b}, [pa, pb](Node& self) {
    detail::add_into(pa.get(), self.grad);
    detail::add_into(pb.get(), self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make(a.rows(), a.cols(), std::move(v), {a, b}, [pa, pb](Node& self) {
    detail::add_into(pa.get(), self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make(a.rows(), a.cols(), std::move(v), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

// a (r x c) + b (1 x c), b added to every row.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw DomainError("add_row: bias must be 1 x cols");
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] += b.values()[j];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make(r, c, std::move(v), {a, b}, [pa, pb, r, c](Node& self) {
    detail::add_into(pa.get(), self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pb->grad[j] += self.grad[i * c + j];
    }
  });
}

// s * a + t elementwise.
inline Tensor affine(const Tensor& a, double s, double t = 0.0) {
  return detail::unary(a, [s, t](double x) { return s * x + t; }, [s](double, double) { return s; });
}
inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0.0)) throw DomainError("log of non-positive value");
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
  return detail::unary(
      a, [slope](double x) { return x > 0 ? x : slope * x; }, [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}
inline Tensor elu(const Tensor& a, double alpha = 1.0) {
  return detail::unary(
      a, [alpha](double x) { return x > 0 ? x : alpha * (std::exp(x) - 1.0); },
      [alpha](double x, double y) { return x > 0 ? 1.0 : y + alpha; });
}

// Row-wise softmax, stabilised by subtracting each row's maximum.
inline Tensor softmax_rows(const Tensor& a) {
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = &a.values()[i * c];
    const double m = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (v[i * c + j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
  }
  auto pa = a.ptr();
  return detail::make(r, c, std::move(v), {a}, [pa, r, c](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        pa->grad[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

inline Tensor log_softmax_rows(const Tensor& a) {
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = &a.values()[i * c];
    const double m = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x[j] - lz;
  }
  auto pa = a.ptr();
  return detail::make(r, c, std::move(v), {a}, [pa, r, c](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        pa->grad[i * c + j] += self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gs;
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto pa = a.ptr();
  return detail::make(1, 1, {s}, {a}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (auto& g : pa->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Column means: r x c -> 1 x c.
inline Tensor mean_rows(const Tensor& a) {
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j] += a.values()[i * c + j];
  for (auto& x : v) x /= static_cast<double>(r);
  auto pa = a.ptr();
  return detail::make(1, c, std::move(v), {a}, [pa, r, c](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j] / static_cast<double>(r);
  });
}

inline Tensor transpose(const Tensor& a) {
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a.values()[i * c + j];
  auto pa = a.ptr();
  return detail::make(c, r, std::move(v), {a}, [pa, r, c](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
  });
}

// a (r x c) times column vector g (r x 1), row i scaled by g[i].
inline Tensor mul_col(const Tensor& a, const Tensor& g) {
  if (g.cols() != 1 || g.rows() != a.rows()) throw DomainError("mul_col: need r x 1 multiplier");
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = a.values()[i * c + j] * g.values()[i];
  auto pa = a.ptr(), pg = g.ptr();
  return detail::make(r, c, std::move(v), {a, g}, [pa, pg, r, c](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[i * c + j] * pg->value[i];
    }
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pg->grad[i] += self.grad[i * c + j] * pa->value[i * c + j];
    }
  });
}

// Every entry of a scaled by the 1 x 1 tensor s.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DomainError("scale_by: scalar tensor expected");
  std::vector<double> v(a.values());
  const double k = s.values()[0];
  for (auto& x : v) x *= k;
  auto pa = a.ptr(), ps = s.ptr();
  return detail::make(a.rows(), a.cols(), std::move(v), {a, s}, [pa, ps](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * ps->value[0];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->value[i];
      ps->grad[0] += acc;
    }
  });
}

// Horizontal concatenation of tensors with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DomainError("concat of nothing");
  const auto r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DomainError("concat_cols: row counts differ");
    c += p.cols();
  }
  std::vector<double> v(r * c);
  std::vector<std::shared_ptr<Node>> ps;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(&p.values()[i * p.cols()], p.cols(), &v[i * c + off]);
    off += p.cols();
    ps.push_back(p.ptr());
  }
  return detail::make(r, c, std::move(v), parts, [ps, r, c](Node& self) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < p->cols; ++j) p->grad[i * p->cols + j] += self.grad[i * c + off + j];
      }
      off += p->cols;
    }
  });
}

// Vertical stacking of tensors with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DomainError("concat of nothing");
  const auto c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DomainError("concat_rows: column counts differ");
    r += p.rows();
  }
  std::vector<double> v;
  v.reserve(r * c);
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) {
    v.insert(v.end(), p.values().begin(), p.values().end());
    ps.push_back(p.ptr());
  }
  return detail::make(r, c, std::move(v), parts, [ps](Node& self) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

inline Tensor slice_row(const Tensor& a, std::size_t i) {
  if (i >= a.rows()) throw DomainError("slice_row out of range");
  const auto c = a.cols();
  std::vector<double> v(a.values().begin() + static_cast<long>(i * c), a.values().begin() + static_cast<long>((i + 1) * c));
  auto pa = a.ptr();
  return detail::make(1, c, std::move(v), {a}, [pa, i, c](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t from, std::size_t count) {
  if (from + count > a.cols()) throw DomainError("slice_cols out of range");
  const auto r = a.rows(), c = a.cols();
  std::vector<double> v(r * count);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(&a.values()[i * c + from], count, &v[i * count]);
  auto pa = a.ptr();
  return detail::make(r, count, std::move(v), {a}, [pa, r, c, from, count](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) pa->grad[i * c + from + j] += self.grad[i * count + j];
  });
}

// ---- optimiser -------------------------------------------------------------

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// One bias-corrected Adam update over `params` (moments indexed by position).
inline void adam_step(AdamState& st, std::vector<Tensor>& params) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.size(), 0.0);
      st.v.emplace_back(p.size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw DomainError("adam: parameter list changed");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].mutable_values();
    const auto& g = params[k].grad();
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      w[i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

// ---- gradient checking -----------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]"
  std::size_t checked = 0;
};

// Central differences against backward() for every entry of every parameter.
// Relative error is |a - n| / max(|a|, |n|, floor).
template <class LossFn>
GradCheckResult gradient_check(std::map<std::string, Tensor>& params, LossFn loss_fn, double eps = 1e-5,
                               double floor = 1e-6) {
  for (auto& [_, p] : params) p.zero_grad();
  loss_fn().backward();
  std::map<std::string, std::vector<double>> analytic;
  for (auto& [name, p] : params) analytic[name] = p.grad();
  GradCheckResult res;
  for (auto& [name, p] : params) {
    auto& w = p.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = loss_fn().item();
      w[i] = orig - eps;
      const double down = loss_fn().item();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[name][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

// ---- checkpoint files ------------------------------------------------------
//
// "AVOIDCKPT 1\n", u64 metadata length, metadata JSON, u64 tensor count, then
// per tensor: u64 name length, name, u64 rows, u64 cols, rows*cols IEEE-754
// doubles. All integers and doubles little-endian.

inline constexpr const char* kCheckpointMagic = "AVOIDCKPT 1\n";

namespace detail {
inline void put_u64(std::ostream& os, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint", 0, "truncated file");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}
}  // namespace detail

struct NamedTensors {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

inline void save_tensors(const std::filesystem::path& path, const NamedTensors& nt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
  const auto meta = nt.meta.dump();
  detail::put_u64(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put_u64(os, nt.tensors.size());
  for (const auto& [name, t] : nt.tensors) {
    detail::put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(os, t.rows());
    detail::put_u64(os, t.cols());
    for (double x : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, 8);
      detail::put_u64(os, bits);
    }
  }
}

inline NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  const std::string magic(kCheckpointMagic);
  std::string head(magic.size(), '\0');
  if (!is.read(head.data(), static_cast<std::streamsize>(head.size())) || head != magic)
    throw ParseError(path.string(), 1, "not a checkpoint (bad header)");
  NamedTensors nt;
  const auto mlen = detail::get_u64(is);
  if (mlen > (1u << 30)) throw ParseError(path.string(), 1, "metadata too large");
  std::string meta(mlen, '\0');
  if (!is.read(meta.data(), static_cast<std::streamsize>(mlen))) throw ParseError(path.string(), 1, "truncated metadata");
  try {
    nt.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  const auto count = detail::get_u64(is);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto nlen = detail::get_u64(is);
    if (nlen > 4096) throw ParseError(path.string(), 1, "tensor name too long");
    std::string name(nlen, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(nlen))) throw ParseError(path.string(), 1, "truncated name");
    const auto r = detail::get_u64(is), c = detail::get_u64(is);
    if (r * c > (1ull << 32)) throw ParseError(path.string(), 1, "tensor too large");
    std::vector<double> v(r * c);
    for (auto& x : v) {
      const auto bits = detail::get_u64(is);
      std::memcpy(&x, &bits, 8);
    }
    nt.tensors[name] = Tensor::from(r, c, std::move(v), true);
  }
  return nt;
}

}  // namespace avoid::ag
