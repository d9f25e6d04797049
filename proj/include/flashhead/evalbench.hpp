#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flashhead/clustering.hpp"
#include "flashhead/head.hpp"
#include "flashhead/matrix.hpp"
#include "flashhead/quant.hpp"

namespace flashhead {

// ---------------------------------------------------------------------------
// Synthetic inputs

struct SyntheticSpec {
  std::size_t vocab = 128256;
  std::size_t dim = 2048;
  /// Tokens are scattered around vocab / mean_group latent directions with
  /// random (unequal) group sizes.
  std::size_t mean_group = 16;
  double noise = 0.6;
  std::uint64_t seed = 0;
};

EmbeddingMatrix synthetic_embeddings(const SyntheticSpec& spec);

enum class QueryMode {
  Normal,  // h ~ N(0, I)
  Hard,    // h = a * e_i + (1 - a) * e_j for random tokens i, j
};

HiddenBatch synthetic_queries(const EmbeddingMatrix& e, std::size_t n,
                              QueryMode mode, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dense oracle

std::vector<float> dense_logits(const EmbeddingMatrix& e,
                                std::span<const float> h,
                                Accumulation acc = Accumulation::F32);

/// Dense argmax without materializing the logit vector.
TokenId dense_argmax(const EmbeddingMatrix& e, std::span<const float> h);

/// Exact full matmul then top-k (ties: lower id), ordered best first.
std::vector<TokenId> dense_head_oracle(const EmbeddingMatrix& e,
                                       std::span<const float> h, std::size_t k,
                                       Accumulation acc = Accumulation::F32);

/// Top-1 of a dense head whose weights were quantized.
TokenId quantized_dense_argmax(const QuantizedCentroids& qe,
                               std::span<const float> h);

// ---------------------------------------------------------------------------
// Containment

struct ContainmentReport {
  std::size_t k = 1;
  std::size_t n = 0;
  std::size_t hits = 0;
  double fraction = 0.0;
  std::size_t clusters = 0;
  std::size_t probes = 0;
  DecodeMode mode = DecodeMode::Greedy;
  int quant_bits = 0;  // 0 = full-precision stage 1
};

/// Per query: hit iff the head's token is in the dense top-k. Queries are
/// evaluated in parallel; query i in sample mode uses seed
/// derive_seed(cfg.seed, i).
ContainmentReport containment(const ClusteredIndex& index,
                              const EmbeddingMatrix& e,
                              const HiddenBatch& queries,
                              const DecodeConfig& cfg, std::size_t k,
                              const QuantizedCentroids* stage1 = nullptr);

/// Dense top-k lists for every query (reused across sweeps).
std::vector<std::vector<TokenId>> oracle_topk(const EmbeddingMatrix& e,
                                              const HiddenBatch& queries,
                                              std::size_t k);

ContainmentReport containment_against(
    const ClusteredIndex& index, const EmbeddingMatrix& e,
    const HiddenBatch& queries, const DecodeConfig& cfg,
    const std::vector<std::vector<TokenId>>& oracle, std::size_t k,
    const QuantizedCentroids* stage1 = nullptr);

/// Fraction of queries whose top-1 differs between two heads.
double drift_rate(const HiddenBatch& queries,
                  const std::function<TokenId(std::span<const float>)>& a,
                  const std::function<TokenId(std::span<const float>)>& b);

// ---------------------------------------------------------------------------
// Latency

struct LatencyStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double min_ms = 0.0;
};

LatencyStats summarize_latencies(std::vector<double> samples_ms);

struct BenchOptions {
  std::size_t reps = 100;
  std::size_t warmup = 10;
};

struct LatencyReport {
  LatencyStats head;
  LatencyStats dense;
  std::size_t reps = 0;
  std::size_t warmup = 0;
  double speedup_vs_dense = 0.0;  // dense median / head median
  std::string hardware;
};

using HeadFn = std::function<TokenId(std::span<const float>)>;

/// Times `head` and the dense head on single queries (batch size 1),
/// alternating the two per repetition. Warmup calls are not recorded.
LatencyReport bench_heads(const HeadFn& head, const HeadFn& dense,
                          const HiddenBatch& queries, const BenchOptions& opts);

/// Head-only latency of the two-stage head (greedy) against the dense head.
/// Requires reps >= 30 and warmup >= 10.
LatencyReport bench_tpot_head(const EmbeddingMatrix& e,
                              const ClusteredIndex& index,
                              const HiddenBatch& queries,
                              const DecodeConfig& cfg, const BenchOptions& opts,
                              const QuantizedCentroids* stage1 = nullptr);

std::string hardware_descriptor();

// ---------------------------------------------------------------------------
// Ablations

struct BalanceAblation {
  ClusteredIndex balanced;
  ClusteredIndex unbalanced;
  ContainmentReport balanced_containment;
  ContainmentReport unbalanced_containment;
  LatencyReport balanced_latency;
  LatencyReport unbalanced_latency;
};

/// Builds a balanced and an unbalanced index from the same options and seed
/// and reports containment and head latency for both.
BalanceAblation ablation_balance(const EmbeddingMatrix& e,
                                 const ClusterOptions& opts,
                                 const HiddenBatch& queries,
                                 const DecodeConfig& cfg, std::size_t k,
                                 const BenchOptions& bench);

/// Same, for indexes that were already built.
BalanceAblation ablation_balance(const EmbeddingMatrix& e,
                                 ClusteredIndex balanced,
                                 ClusteredIndex unbalanced,
                                 const HiddenBatch& queries,
                                 const DecodeConfig& cfg, std::size_t k,
                                 const BenchOptions& bench);

struct SeedRobustness {
  std::vector<std::uint64_t> seeds;
  std::vector<double> fractions;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

SeedRobustness seed_robustness(const EmbeddingMatrix& e,
                               const ClusterOptions& opts,
                               std::span<const std::uint64_t> seeds,
                               const HiddenBatch& queries,
                               const DecodeConfig& cfg, std::size_t k = 1);

struct SweepRow {
  std::size_t clusters = 0;
  std::size_t probes = 0;
  std::size_t cluster_size = 0;
  double containment = 0.0;
  LatencyReport latency;
  double cost_ratio = 0.0;
};

/// Cluster/probe grid. One index is built per cluster count. Latency is
/// skipped when bench.reps == 0.
std::vector<SweepRow> sweep(const EmbeddingMatrix& e,
                            const ClusterOptions& base,
                            std::span<const std::size_t> cluster_counts,
                            std::span<const std::size_t> probe_counts,
                            const HiddenBatch& queries, std::size_t k,
                            const BenchOptions& bench);

}  // namespace flashhead
