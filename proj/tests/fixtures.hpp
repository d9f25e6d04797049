#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

#include "flashhead/clustering.hpp"
#include "flashhead/matrix.hpp"
#include "flashhead/rng.hpp"

namespace fixtures {

using namespace flashhead;

// Eight unit vectors at angles k * 45 degrees.
inline EmbeddingMatrix f8() {
  Matrix m(8, 2);
  for (std::size_t k = 0; k < 8; ++k) {
    const double a = static_cast<double>(k) * std::numbers::pi / 4.0;
    m(k, 0) = static_cast<float>(std::cos(a));
    m(k, 1) = static_cast<float>(std::sin(a));
  }
  return {m};
}

inline Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed,
                       double scale = 1.0) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (auto& x : m.storage()) x = static_cast<float>(rng.normal() * scale);
  return m;
}

inline EmbeddingMatrix random_embeddings(std::size_t v, std::size_t d,
                                         std::uint64_t seed) {
  return {gaussian(v, d, seed)};
}

inline HiddenBatch random_queries(std::size_t n, std::size_t d,
                                  std::uint64_t seed, double scale = 1.0) {
  return {gaussian(n, d, seed, scale)};
}

// Index with the given groups as clusters; centroid = normalized mean of the
// normalized member rows. Short groups are padded.
inline ClusteredIndex index_from_groups(
    const EmbeddingMatrix& e, const std::vector<std::vector<TokenId>>& groups) {
  ClusteredIndex idx;
  const std::size_t d = e.dim();
  std::size_t b = 0;
  for (const auto& g : groups) b = std::max(b, g.size());
  idx.centroids = Matrix(groups.size(), d);
  idx.cluster_size = b;
  idx.vocab = e.vocab();
  idx.c2t.assign(groups.size() * b, kPadToken);
  idx.balanced = true;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].size() != b) idx.balanced = false;
    std::vector<double> sum(d, 0.0);
    for (std::size_t j = 0; j < groups[k].size(); ++j) {
      const auto t = groups[k][j];
      idx.c2t[k * b + j] = t;
      double n = 0.0;
      for (auto x : e.row(t)) n += double(x) * x;
      n = std::sqrt(n);
      for (std::size_t i = 0; i < d; ++i) sum[i] += e.row(t)[i] / n;
    }
    double n = 0.0;
    for (auto x : sum) n += x * x;
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) {
      idx.centroids(k, i) = static_cast<float>(sum[i] / n);
    }
  }
  return idx;
}

// Contiguous groups {0..b-1}, {b..2b-1}, ...
inline std::vector<std::vector<TokenId>> contiguous_groups(std::size_t v,
                                                           std::size_t b) {
  std::vector<std::vector<TokenId>> g(v / b);
  for (std::size_t t = 0; t < v; ++t) g[t / b].push_back(static_cast<TokenId>(t));
  return g;
}

inline double dot64(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

// Softmax of z / tau in double precision.
inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp((z[i] - m) / tau);
  for (auto& x : p) x /= s;
  return p;
}

inline std::vector<double> exact_logits(const EmbeddingMatrix& e,
                                        std::span<const float> h) {
  std::vector<double> z(e.vocab());
  for (std::size_t t = 0; t < z.size(); ++t) z[t] = dot64(e.row(t), h);
  return z;
}

inline std::filesystem::path temp_path(const std::string& name) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("flashhead_test_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir / (std::to_string(counter++) + "_" + name);
}

}  // namespace fixtures
