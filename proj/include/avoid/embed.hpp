#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "avoid/error.hpp"
#include "avoid/random.hpp"
#include "avoid/text.hpp"

namespace avoid {

// Fixed-length real vector. Providers guarantee unit norm and finite entries.
struct Embedding {
  std::vector<double> values;

  Embedding() = default;
  explicit Embedding(std::size_t dim) : values(dim, 0.0) {}
  explicit Embedding(std::vector<double> v) : values(std::move(v)) {}

  std::size_t dim() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  std::span<const double> view() const { return values; }

  friend bool operator==(const Embedding&, const Embedding&) = default;
};

namespace vec {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("euclidean: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline bool normalize(std::vector<double>& v) {
  const double n = norm(v);
  if (n == 0.0 || !std::isfinite(n)) return false;
  for (auto& x : v) x /= n;
  return true;
}

inline std::vector<double> mean(const std::vector<Embedding>& xs) {
  if (xs.empty()) throw DomainError("mean of empty embedding set");
  std::vector<double> m(xs.front().dim(), 0.0);
  for (const auto& e : xs) {
    if (e.dim() != m.size()) throw DomainError("mean: dimension mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += e[i];
  }
  for (auto& x : m) x /= static_cast<double>(xs.size());
  return m;
}

}  // namespace vec

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("cosine: dimension mismatch");
  const double na = vec::norm(a), nb = vec::norm(b);
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine: undefined similarity for zero vector");
  return std::clamp(vec::dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine(const Embedding& a, const Embedding& b) { return cosine(a.view(), b.view()); }

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual Embedding embed(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string kind() const = 0;
};

/// Deterministic feature-hashing provider.
///
/// Each word token is hashed into one of `dim` buckets with a seeded FNV-1a
/// hash and contributes +1 or -1 depending on an independent sign hash. The
/// accumulated vector is L2-normalized. If every contribution cancels (or the
/// text has no word tokens) the whole normalized string is hashed into a
/// single bucket instead, so the output is always a unit vector.
class HashEmbeddingProvider final : public EmbeddingProvider {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x41564f4944ULL;

  explicit HashEmbeddingProvider(std::size_t dim = 768, std::uint64_t seed = kDefaultSeed)
      : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
  }

  Embedding embed(std::string_view raw) const override {
    const std::string t = text::normalize_ws(raw);
    if (t.empty()) throw InputError("embed_text: empty text");
    std::vector<double> v(dim_, 0.0);
    for (const auto& tok : text::words(t)) add(v, tok);
    if (!vec::normalize(v)) {
      std::fill(v.begin(), v.end(), 0.0);
      add(v, t);
      vec::normalize(v);
    }
    return Embedding(std::move(v));
  }

  std::size_t dim() const override { return dim_; }
  std::uint64_t seed() const { return seed_; }
  std::string kind() const override { return "hash"; }

 private:
  void add(std::vector<double>& v, std::string_view tok) const {
    const std::uint64_t h = fnv1a64(tok, seed_);
    std::uint64_t mix = h;
    const std::uint64_t s = splitmix64(mix);
    v[h % dim_] += (s >> 63) ? -1.0 : 1.0;
  }

  std::size_t dim_;
  std::uint64_t seed_;
};

/// Exact nearest-neighbour index by cosine similarity (linear scan).
class KnnIndex {
 public:
  struct Hit {
    std::string id;
    double similarity;
  };

  void add(std::string id, Embedding e) {
    if (!items_.empty() && e.dim() != items_.front().second.dim())
      throw DomainError("knn index: dimension mismatch");
    items_.emplace_back(std::move(id), std::move(e));
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  // Sorted by similarity descending; equal similarities keep insertion order.
  std::vector<Hit> query(const Embedding& q, std::size_t k) const {
    if (k == 0) throw DomainError("knn: k must be >= 1");
    std::vector<Hit> hits;
    hits.reserve(items_.size());
    for (const auto& [id, e] : items_) hits.push_back({id, cosine(q, e)});
    std::stable_sort(hits.begin(), hits.end(),
                     [](const Hit& a, const Hit& b) { return a.similarity > b.similarity; });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

 private:
  std::vector<std::pair<std::string, Embedding>> items_;
};

}  // namespace avoid
