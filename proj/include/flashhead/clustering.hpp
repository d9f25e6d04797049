#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "flashhead/matrix.hpp"

namespace flashhead {

/// Sentinel stored in padded C2T rows of an unbalanced index.
inline constexpr TokenId kPadToken = 0xFFFFFFFFu;

struct IndexMeta {
  std::uint64_t seed = 0;
  std::uint32_t iterations = 0;
  std::vector<double> objective_trace;

  friend bool operator==(const IndexMeta&, const IndexMeta&) = default;
};

/// Centroid matrix plus the dense cluster-to-token map.
///
/// Row k of `c2t` lists the tokens of cluster k. A balanced index has
/// exactly `cluster_size` tokens per row. An unbalanced index pads short rows
/// with `kPadToken` up to the largest cluster.
struct ClusteredIndex {
  Matrix centroids;             // c x d, unit rows
  std::vector<TokenId> c2t;     // c x cluster_size, row-major
  std::size_t cluster_size = 0; // b
  std::size_t vocab = 0;        // v
  bool balanced = true;
  IndexMeta meta;

  std::size_t clusters() const noexcept { return centroids.rows(); }
  std::size_t dim() const noexcept { return centroids.cols(); }
  std::span<const TokenId> row(std::size_t k) const noexcept {
    return {c2t.data() + k * cluster_size, cluster_size};
  }
  /// Number of non-pad entries in row k.
  std::size_t members(std::size_t k) const noexcept;

  friend bool operator==(const ClusteredIndex&,
                         const ClusteredIndex&) = default;
};

/// Throws InvalidOptions when the index violates its structural invariants
/// (shape, disjoint cover of 0..v-1, unit centroids within `norm_tol`).
void check_index(const ClusteredIndex& index, double norm_tol = 1e-5);

enum class InitMethod { KMeansPlusPlus, UniformRandom };

struct ClusterOptions {
  std::size_t clusters = 8016;
  int max_iterations = 1000;
  std::uint64_t seed = 0;
  bool balanced = true;
  double tolerance = 1e-6;
  InitMethod init = InitMethod::KMeansPlusPlus;
  /// Per-token preference list kept from the assignment step for balancing.
  std::size_t preference_list = 32;
};

enum class ZeroRowPolicy { Throw, SubstituteBasis };

struct NormalizedRows {
  EmbeddingMatrix unit;
  std::vector<std::size_t> zero_rows;  // rows replaced by e_1
};

/// Scales each row to unit L2 norm. Zero rows either throw ZeroNormRow(i) or
/// are replaced by the basis vector e_1 and reported.
NormalizedRows normalize_rows(const EmbeddingMatrix& e,
                              ZeroRowPolicy policy = ZeroRowPolicy::Throw);

/// Cosine similarities for the balancing pass.
class SimilaritySource {
 public:
  virtual ~SimilaritySource() = default;
  virtual std::size_t clusters() const = 0;
  virtual float similarity(TokenId token, std::uint32_t cluster) const = 0;
  /// Clusters ordered by decreasing similarity (ties: lower id first). May be
  /// truncated; clusters missing from the list rank below all listed ones.
  virtual std::span<const std::uint32_t> ranked(TokenId token) const = 0;
};

/// Full v x c similarity matrix.
class DenseSimilarity final : public SimilaritySource {
 public:
  explicit DenseSimilarity(Matrix sims);
  std::size_t clusters() const override { return sims_.cols(); }
  float similarity(TokenId token, std::uint32_t cluster) const override {
    return sims_(token, cluster);
  }
  std::span<const std::uint32_t> ranked(TokenId token) const override;

 private:
  Matrix sims_;
  std::vector<std::uint32_t> order_;
};

struct Reassignment {
  TokenId token;
  std::uint32_t from;
  std::uint32_t to;
};

struct BalanceResult {
  std::vector<std::uint32_t> assignment;
  std::vector<Reassignment> moves;  // in execution order
};

/// Greedy capacity repair. Overfull clusters (in id order) evict their
/// lowest-similarity members (ties: lower token id first); each evicted token
/// moves to its most similar cluster that still has a free slot.
BalanceResult balance_assignment(std::span<const std::uint32_t> assignment,
                                 const SimilaritySource& sims,
                                 std::size_t capacity);

/// Balanced (or plain) spherical k-means over unit rows.
ClusteredIndex spherical_kmeans(const EmbeddingMatrix& unit,
                                const ClusterOptions& opts);

/// Sum over clusters and members of (1 - e_i . c_k), 64-bit accumulation.
double clustering_objective(const EmbeddingMatrix& unit,
                            const ClusteredIndex& index);

/// Token -> cluster map recovered from the index.
std::vector<std::uint32_t> assignment_of(const ClusteredIndex& index);

}  // namespace flashhead
