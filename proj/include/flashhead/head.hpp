#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "flashhead/clustering.hpp"
#include "flashhead/matrix.hpp"
#include "flashhead/quant.hpp"
#include "flashhead/rng.hpp"

namespace flashhead {

enum class DecodeMode { Greedy, Sample };
enum class Accumulation { F32, F64 };

struct DecodeConfig {
  std::size_t probes = 512;
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  /// Stage-1 temperature; falls back to `temperature` when unset.
  std::optional<double> stage1_temperature;
  std::uint64_t seed = 0;
  Accumulation accumulation = Accumulation::F32;

  double stage1_tau() const { return stage1_temperature.value_or(temperature); }
  /// Throws InvalidConfig unless 1 <= probes <= clusters and, in sample
  /// mode, both temperatures are positive.
  void validate(std::size_t clusters) const;
};

struct ProbeSelection {
  std::vector<std::uint32_t> ids;
  std::vector<float> logits;
};

struct CandidateSet {
  std::vector<TokenId> tokens;
  Matrix rows;  // gathered rows of E, one per token
};

/// Stage 1: logits[k] = dot(centroid_k, h).
std::vector<float> centroid_logits(const ClusteredIndex& index,
                                   std::span<const float> h);

/// The p largest logits, ordered by (logit desc, id asc).
ProbeSelection select_probes_greedy(std::span<const float> logits,
                                    std::size_t p);

/// p ids drawn without replacement from softmax(logits / tau) via Gumbel-top-p.
ProbeSelection select_probes_sampled(std::span<const float> logits,
                                     std::size_t p, double tau, Rng& rng);

CandidateSet gather_candidates(const ClusteredIndex& index,
                               const EmbeddingMatrix& e,
                               const ProbeSelection& probes);

/// Stage-2 logits over the probed clusters without materializing the
/// gathered matrix. Pad slots are skipped.
void candidate_logits(const ClusteredIndex& index, const EmbeddingMatrix& e,
                      std::span<const std::uint32_t> probes,
                      std::span<const float> h, Accumulation acc,
                      std::vector<TokenId>& tokens, std::vector<float>& logits);

/// Two-stage head. `stage1` swaps the centroid matmul for the quantized one.
TokenId decode(const ClusteredIndex& index, const EmbeddingMatrix& e,
               std::span<const float> h, const DecodeConfig& cfg, Rng& rng,
               const QuantizedCentroids* stage1 = nullptr);

/// Greedy mode, or sample mode seeded from cfg.seed.
TokenId decode(const ClusteredIndex& index, const EmbeddingMatrix& e,
               std::span<const float> h, const DecodeConfig& cfg,
               const QuantizedCentroids* stage1 = nullptr);

/// Decodes every query row in parallel. Row i draws from
/// Rng(derive_seed(cfg.seed, i)), so output is independent of thread count.
std::vector<TokenId> decode_batch(const ClusteredIndex& index,
                                  const EmbeddingMatrix& e,
                                  const HiddenBatch& queries,
                                  const DecodeConfig& cfg,
                                  const QuantizedCentroids* stage1 = nullptr);

struct CostModel {
  std::uint64_t dense_mults = 0;
  std::uint64_t flash_mults = 0;
  double ratio = 0.0;  // dense / flash
  std::uint64_t active_params_dense = 0;
  std::uint64_t active_params_flash = 0;
};

/// Multiplication and active-weight counts per output token.
CostModel cost_model(std::uint64_t v, std::uint64_t d, std::uint64_t c,
                     std::uint64_t p);

}  // namespace flashhead
