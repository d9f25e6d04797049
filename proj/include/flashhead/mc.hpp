#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flashhead/clustering.hpp"
#include "flashhead/matrix.hpp"
#include "flashhead/rng.hpp"

namespace flashhead {

struct MarginalEstimate {
  std::vector<double> probs;
  std::uint64_t n_samples = 0;
  std::size_t clipped = 0;
  double clip_value = 0.0;
};

/// Averages the full candidate softmax over N sampled probe sets. Sample
/// chunks are fixed-size, each with its own generator and 64-bit partial
/// sum, merged in chunk order.
MarginalEstimate mc_marginal(const ClusteredIndex& index,
                             const EmbeddingMatrix& e, std::span<const float> h,
                             std::size_t p, double tau, std::uint64_t n,
                             Rng& rng);

/// Token-frequency estimator: one sampled token per probe set.
MarginalEstimate mc_token_frequencies(const ClusteredIndex& index,
                                      const EmbeddingMatrix& e,
                                      std::span<const float> h, std::size_t p,
                                      double tau, std::uint64_t n, Rng& rng);

/// Maximum number of probe subsets exact_marginal will enumerate.
inline constexpr std::uint64_t kMaxExactSubsets = 1'000'000;

/// Exact marginal by enumerating every probe subset (tiny instances only).
MarginalEstimate exact_marginal(const ClusteredIndex& index,
                                const EmbeddingMatrix& e,
                                std::span<const float> h, std::size_t p,
                                double tau);

/// Probability that sequential softmax sampling without replacement over
/// `weights` (unnormalized, positive) selects exactly `subset`.
double subset_probability_orderings(std::span<const double> weights,
                                    std::span<const std::uint32_t> subset);
/// Same quantity via the Gumbel-top-k integral
/// int_0^inf W_rest e^{-W_rest u} prod_{i in S} (1 - e^{-w_i u}) du.
double subset_probability_quadrature(std::span<const double> weights,
                                     std::span<const std::uint32_t> subset);

/// Replaces zeros with the smallest non-zero entry. No renormalization.
MarginalEstimate clip_zeros(MarginalEstimate est);

/// Sum of log probs[t]; throws ZeroProbability on a zero entry.
double log_likelihood(const MarginalEstimate& est,
                      std::span<const TokenId> tokens);

/// L1 distance between two probability vectors.
double l1_distance(std::span<const double> a, std::span<const double> b);

}  // namespace flashhead
