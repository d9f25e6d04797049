#include "flashhead/mc.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "flashhead/error.hpp"
#include "flashhead/head.hpp"
#include "flashhead/kernels.hpp"

namespace flashhead {

namespace {

// Fixed work split for the Monte Carlo loops: `kLanes` partial sums, each fed
// by chunks of `kChunk` samples with their own generator. Neither constant
// depends on the thread count, so estimates are reproducible across machines.
constexpr std::size_t kLanes = 16;
constexpr std::uint64_t kChunk = 256;

void check_inputs(const ClusteredIndex& index, const EmbeddingMatrix& e,
                  std::span<const float> h, std::size_t p, double tau) {
  if (h.size() != index.dim() || e.dim() != index.dim() ||
      e.vocab() != index.vocab) {
    throw Error(ErrorCode::DimMismatch, "inputs do not match index");
  }
  if (p < 1 || p > index.clusters()) {
    throw Error(ErrorCode::InvalidConfig, "probe count outside [1, c]");
  }
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be > 0");
}

template <typename PerSample>
std::vector<double> run_lanes(std::size_t v, std::uint64_t n, std::uint64_t base_seed,
                              const PerSample& per_sample) {
  const std::uint64_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<std::vector<double>> partial(kLanes);
  parallel_for(kLanes, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t lane = begin; lane < end; ++lane) {
      auto& acc = partial[lane];
      acc.assign(v, 0.0);
      for (std::uint64_t chunk = lane; chunk < chunks; chunk += kLanes) {
        Rng rng(derive_seed(base_seed, chunk));
        const std::uint64_t stop = std::min(n, (chunk + 1) * kChunk);
        for (std::uint64_t s = chunk * kChunk; s < stop; ++s) per_sample(rng, acc);
      }
    }
  });
  std::vector<double> total(v, 0.0);
  for (const auto& acc : partial) {
    for (std::size_t t = 0; t < v; ++t) total[t] += acc[t];
  }
  return total;
}

std::uint64_t binomial_capped(std::uint64_t n, std::uint64_t k, std::uint64_t cap) {
  k = std::min(k, n - k);
  long double r = 1.0L;
  for (std::uint64_t i = 1; i <= k; ++i) {
    r = r * static_cast<long double>(n - k + i) / static_cast<long double>(i);
    if (r > static_cast<long double>(cap)) return cap + 1;
  }
  return static_cast<std::uint64_t>(std::llround(r));
}

}  // namespace

MarginalEstimate mc_marginal(const ClusteredIndex& index,
                             const EmbeddingMatrix& e, std::span<const float> h,
                             std::size_t p, double tau, std::uint64_t n,
                             Rng& rng) {
  check_inputs(index, e, h, p, tau);
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "N must be >= 1");
  const auto coarse = centroid_logits(index, h);
  const std::uint64_t base = rng.next_u64();

  auto per_sample = [&](Rng& r, std::vector<double>& acc) {
    thread_local std::vector<TokenId> tokens;
    thread_local std::vector<float> z;
    thread_local std::vector<double> w;
    const auto sel = select_probes_sampled(coarse, p, tau, r);
    candidate_logits(index, e, sel.ids, h, Accumulation::F32, tokens, z);
    double zmax = -std::numeric_limits<double>::infinity();
    for (float x : z) zmax = std::max(zmax, static_cast<double>(x) / tau);
    w.resize(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      w[i] = std::exp(static_cast<double>(z[i]) / tau - zmax);
      total += w[i];
    }
    for (std::size_t i = 0; i < z.size(); ++i) acc[tokens[i]] += w[i] / total;
  };

  MarginalEstimate est;
  est.probs = run_lanes(index.vocab, n, base, per_sample);
  for (double& x : est.probs) x /= static_cast<double>(n);
  est.n_samples = n;
  return est;
}

MarginalEstimate mc_token_frequencies(const ClusteredIndex& index,
                                      const EmbeddingMatrix& e,
                                      std::span<const float> h, std::size_t p,
                                      double tau, std::uint64_t n, Rng& rng) {
  check_inputs(index, e, h, p, tau);
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "N must be >= 1");
  const std::uint64_t base = rng.next_u64();
  DecodeConfig cfg;
  cfg.probes = p;
  cfg.mode = DecodeMode::Sample;
  cfg.temperature = tau;

  auto per_sample = [&](Rng& r, std::vector<double>& acc) {
    acc[decode(index, e, h, cfg, r)] += 1.0;
  };
  MarginalEstimate est;
  est.probs = run_lanes(index.vocab, n, base, per_sample);
  for (double& x : est.probs) x /= static_cast<double>(n);
  est.n_samples = n;
  return est;
}

double subset_probability_orderings(std::span<const double> weights,
                                    std::span<const std::uint32_t> subset) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::uint32_t> order(subset.begin(), subset.end());
  std::ranges::sort(order);
  double prob = 0.0;
  do {
    double remaining = total;
    double path = 1.0;
    for (auto k : order) {
      path *= weights[k] / remaining;
      remaining -= weights[k];
    }
    prob += path;
  } while (std::next_permutation(order.begin(), order.end()));
  return prob;
}

double subset_probability_quadrature(std::span<const double> weights,
                                     std::span<const std::uint32_t> subset) {
  double in_subset = 0.0;
  for (auto k : subset) in_subset += weights[k];
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  const double rest = total - in_subset;
  if (rest <= 0.0) return 1.0;
  // x = rest * u turns the rest-of-vocabulary density into e^{-x}.
  std::vector<double> ratio;
  ratio.reserve(subset.size());
  for (auto k : subset) ratio.push_back(weights[k] / rest);
  auto integrand = [&](double x) {
    double f = std::exp(-x);
    for (double a : ratio) f *= -std::expm1(-a * x);
    return f;
  };
  boost::math::quadrature::exp_sinh<double> integrator;
  return integrator.integrate(integrand, 1e-12);
}

MarginalEstimate exact_marginal(const ClusteredIndex& index,
                                const EmbeddingMatrix& e,
                                std::span<const float> h, std::size_t p,
                                double tau) {
  check_inputs(index, e, h, p, tau);
  const std::size_t c = index.clusters();
  const std::uint64_t subsets = binomial_capped(c, p, kMaxExactSubsets);
  if (subsets > kMaxExactSubsets) {
    throw Error(ErrorCode::TooManySubsets,
                "C(" + std::to_string(c) + ", " + std::to_string(p) +
                    ") exceeds the enumeration limit");
  }

  // Everything below is recomputed in 64-bit, independent of the head.
  std::vector<double> coarse(c);
  for (std::size_t k = 0; k < c; ++k) {
    coarse[k] = dot_f64(index.centroids.row(k), h) / tau;
  }
  const double cmax = *std::ranges::max_element(coarse);
  std::vector<double> weights(c);
  for (std::size_t k = 0; k < c; ++k) weights[k] = std::exp(coarse[k] - cmax);

  std::vector<double> z(index.vocab);
  for (std::size_t t = 0; t < index.vocab; ++t) z[t] = dot_f64(e.row(t), h) / tau;

  MarginalEstimate est;
  est.probs.assign(index.vocab, 0.0);
  std::vector<std::uint32_t> subset(p);
  std::iota(subset.begin(), subset.end(), std::uint32_t{0});
  std::vector<TokenId> members;
  for (;;) {
    const double ps = p <= 3 ? subset_probability_orderings(weights, subset)
                             : subset_probability_quadrature(weights, subset);
    members.clear();
    for (auto k : subset) {
      for (TokenId t : index.row(k)) {
        if (t != kPadToken) members.push_back(t);
      }
    }
    double zmax = -std::numeric_limits<double>::infinity();
    for (TokenId t : members) zmax = std::max(zmax, z[t]);
    double total = 0.0;
    for (TokenId t : members) total += std::exp(z[t] - zmax);
    for (TokenId t : members) est.probs[t] += ps * std::exp(z[t] - zmax) / total;

    // Next combination in lexicographic order.
    std::size_t i = p;
    while (i > 0 && subset[i - 1] == c - p + (i - 1)) --i;
    if (i == 0) break;
    ++subset[i - 1];
    for (std::size_t j = i; j < p; ++j) subset[j] = subset[j - 1] + 1;
  }
  est.n_samples = subsets;
  return est;
}

MarginalEstimate clip_zeros(MarginalEstimate est) {
  double floor = std::numeric_limits<double>::infinity();
  for (double x : est.probs) {
    if (x > 0.0) floor = std::min(floor, x);
  }
  if (!std::isfinite(floor)) {
    throw Error(ErrorCode::AllZero, "estimate has no non-zero entry");
  }
  for (double& x : est.probs) {
    if (x == 0.0) {
      x = floor;
      ++est.clipped;
    }
  }
  est.clip_value = floor;
  return est;
}

double log_likelihood(const MarginalEstimate& est,
                      std::span<const TokenId> tokens) {
  double total = 0.0;
  for (TokenId t : tokens) {
    if (t >= est.probs.size()) {
      throw Error(ErrorCode::DimMismatch, "token id out of range");
    }
    if (est.probs[t] <= 0.0) {
      throw Error(ErrorCode::ZeroProbability,
                  "token " + std::to_string(t) + " has zero probability", t);
    }
    total += std::log(est.probs[t]);
  }
  return total;
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimMismatch, "distribution lengths differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

}  // namespace flashhead
