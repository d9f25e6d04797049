#include "flashhead/head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <type_traits>

#include "flashhead/error.hpp"
#include "flashhead/kernels.hpp"

namespace flashhead {

namespace {

void check_dims(const ClusteredIndex& index, const EmbeddingMatrix& e,
                std::span<const float> h) {
  if (h.size() != index.dim() || e.dim() != index.dim()) {
    throw Error(ErrorCode::DimMismatch,
                "hidden/embedding dim does not match index dim " +
                    std::to_string(index.dim()));
  }
  if (e.vocab() != index.vocab) {
    throw Error(ErrorCode::DimMismatch, "embedding rows do not match index vocab");
  }
}

// Top p of `keys` ordered by (key desc, id asc).
template <typename Key>
std::vector<std::uint32_t> top_ids(std::span<const Key> keys, std::size_t p) {
  std::vector<std::uint32_t> ids(keys.size());
  std::iota(ids.begin(), ids.end(), std::uint32_t{0});
  auto cmp = [&](std::uint32_t a, std::uint32_t b) {
    return keys[a] > keys[b] || (keys[a] == keys[b] && a < b);
  };
  if (p < ids.size()) {
    std::nth_element(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(p),
                     ids.end(), cmp);
    ids.resize(p);
  }
  std::ranges::sort(ids, cmp);
  return ids;
}

void check_probe_count(std::size_t p, std::size_t c) {
  if (p < 1 || p > c) {
    throw Error(ErrorCode::InvalidConfig,
                "probe count " + std::to_string(p) + " outside [1, " +
                    std::to_string(c) + "]");
  }
}

/// Visits every stage-2 slot of the probed clusters. Balanced rows are read
/// directly. Padded rows are scored against a zero row and the slot is then
/// masked out, the fixed-shape gather a ragged C2T forces on batched kernels.
template <typename Logit, typename Visit>
void for_each_candidate(const ClusteredIndex& index, const EmbeddingMatrix& e,
                        std::span<const std::uint32_t> probes,
                        std::span<const float> h, Visit&& visit) {
  const std::size_t b = index.cluster_size;
  const std::size_t d = index.dim();
  auto score = [&](const float* row) -> Logit {
    if constexpr (std::is_same_v<Logit, double>) {
      return dot_f64(row, h.data(), d);
    } else {
      return dot_f32(row, h.data(), d);
    }
  };
  if (index.balanced) {
    for (const auto k : probes) {
      const TokenId* tokens = index.c2t.data() + static_cast<std::size_t>(k) * b;
      for (std::size_t j = 0; j < b; ++j) {
        visit(tokens[j], score(e.m.data() + static_cast<std::size_t>(tokens[j]) * d));
      }
    }
    return;
  }
  thread_local std::vector<float> zero_row;
  zero_row.assign(d, 0.0f);
  for (const auto k : probes) {
    const TokenId* tokens = index.c2t.data() + static_cast<std::size_t>(k) * b;
    for (std::size_t j = 0; j < b; ++j) {
      const TokenId t = tokens[j];
      const bool pad = t == kPadToken;
      const float* row =
          pad ? zero_row.data() : e.m.data() + static_cast<std::size_t>(t) * d;
      const Logit z = score(row);
      if (!pad) visit(t, z);
    }
  }
}

template <typename Logit>
TokenId stage2_argmax(const ClusteredIndex& index, const EmbeddingMatrix& e,
                      std::span<const std::uint32_t> probes,
                      std::span<const float> h) {
  TokenId best = std::numeric_limits<TokenId>::max();
  Logit best_z = -std::numeric_limits<Logit>::infinity();
  for_each_candidate<Logit>(index, e, probes, h, [&](TokenId t, Logit z) {
    if (z > best_z || (z == best_z && t < best)) {
      best_z = z;
      best = t;
    }
  });
  return best;
}

// Inverse-CDF draw from softmax(z / tau) over the gathered candidates.
TokenId sample_softmax(std::span<const TokenId> tokens,
                       std::span<const double> z, double tau, Rng& rng) {
  double zmax = -std::numeric_limits<double>::infinity();
  for (double x : z) zmax = std::max(zmax, x / tau);
  std::vector<double> w(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    w[i] = std::exp(z[i] / tau - zmax);
    total += w[i];
  }
  const double target = rng.uniform() * total;
  double run = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    last = i;
    run += w[i];
    if (run >= target) return tokens[i];
  }
  return tokens[last];
}

}  // namespace

void DecodeConfig::validate(std::size_t clusters) const {
  check_probe_count(probes, clusters);
  if (mode == DecodeMode::Sample) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw Error(ErrorCode::InvalidConfig, "temperature must be > 0");
    }
    if (!(stage1_tau() > 0.0) || !std::isfinite(stage1_tau())) {
      throw Error(ErrorCode::InvalidConfig, "stage-1 temperature must be > 0");
    }
  }
}

std::vector<float> centroid_logits(const ClusteredIndex& index,
                                   std::span<const float> h) {
  const std::size_t d = index.dim();
  if (h.size() != d) {
    throw Error(ErrorCode::DimMismatch, "hidden dim does not match centroids");
  }
  std::vector<float> out(index.clusters());
  const float* c = index.centroids.data();
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = dot_f32(c + k * d, h.data(), d);
  }
  return out;
}

ProbeSelection select_probes_greedy(std::span<const float> logits,
                                    std::size_t p) {
  check_probe_count(p, logits.size());
  ProbeSelection sel;
  sel.ids = top_ids(logits, p);
  sel.logits.reserve(p);
  for (auto k : sel.ids) sel.logits.push_back(logits[k]);
  return sel;
}

ProbeSelection select_probes_sampled(std::span<const float> logits,
                                     std::size_t p, double tau, Rng& rng) {
  check_probe_count(p, logits.size());
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be > 0");
  // Gumbel-top-p: perturbed keys, then the p largest.
  std::vector<double> keys(logits.size());
  for (std::size_t k = 0; k < keys.size(); ++k) {
    keys[k] = static_cast<double>(logits[k]) / tau + rng.gumbel();
  }
  ProbeSelection sel;
  sel.ids = top_ids<double>(keys, p);
  sel.logits.reserve(p);
  for (auto k : sel.ids) sel.logits.push_back(logits[k]);
  return sel;
}

CandidateSet gather_candidates(const ClusteredIndex& index,
                               const EmbeddingMatrix& e,
                               const ProbeSelection& probes) {
  const std::size_t d = index.dim();
  if (e.dim() != d || e.vocab() != index.vocab) {
    throw Error(ErrorCode::DimMismatch, "embeddings do not match index");
  }
  CandidateSet out;
  out.tokens.reserve(probes.ids.size() * index.cluster_size);
  for (const auto k : probes.ids) {
    if (k >= index.clusters()) {
      throw Error(ErrorCode::InvalidConfig, "probe id out of range");
    }
    for (TokenId t : index.row(k)) {
      if (t != kPadToken) out.tokens.push_back(t);
    }
  }
  std::vector<float> rows(out.tokens.size() * d);
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    const auto src = e.row(out.tokens[i]);
    std::ranges::copy(src, rows.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  out.rows = Matrix(out.tokens.size(), d, std::move(rows));
  return out;
}

void candidate_logits(const ClusteredIndex& index, const EmbeddingMatrix& e,
                      std::span<const std::uint32_t> probes,
                      std::span<const float> h, Accumulation acc,
                      std::vector<TokenId>& tokens,
                      std::vector<float>& logits) {
  check_dims(index, e, h);
  tokens.clear();
  logits.clear();
  auto push = [&](TokenId t, auto z) {
    tokens.push_back(t);
    logits.push_back(static_cast<float>(z));
  };
  if (acc == Accumulation::F64) {
    for_each_candidate<double>(index, e, probes, h, push);
  } else {
    for_each_candidate<float>(index, e, probes, h, push);
  }
}

TokenId decode(const ClusteredIndex& index, const EmbeddingMatrix& e,
               std::span<const float> h, const DecodeConfig& cfg, Rng& rng,
               const QuantizedCentroids* stage1) {
  cfg.validate(index.clusters());
  check_dims(index, e, h);
  std::vector<float> coarse;
  if (stage1 != nullptr) {
    if (stage1->rows != index.clusters() || stage1->cols != index.dim()) {
      throw Error(ErrorCode::DimMismatch, "quantized stage 1 does not match index");
    }
    coarse = centroid_logits_quant(*stage1, h);
  } else {
    coarse = centroid_logits(index, h);
  }

  if (cfg.mode == DecodeMode::Greedy) {
    const auto probes = select_probes_greedy(coarse, cfg.probes);
    return cfg.accumulation == Accumulation::F64
               ? stage2_argmax<double>(index, e, probes.ids, h)
               : stage2_argmax<float>(index, e, probes.ids, h);
  }

  const auto probes = select_probes_sampled(coarse, cfg.probes, cfg.stage1_tau(), rng);
  std::vector<TokenId> tokens;
  std::vector<double> z;
  tokens.reserve(probes.ids.size() * index.cluster_size);
  z.reserve(tokens.capacity());
  auto push = [&](TokenId t, auto logit) {
    tokens.push_back(t);
    z.push_back(static_cast<double>(logit));
  };
  if (cfg.accumulation == Accumulation::F64) {
    for_each_candidate<double>(index, e, probes.ids, h, push);
  } else {
    for_each_candidate<float>(index, e, probes.ids, h, push);
  }
  return sample_softmax(tokens, z, cfg.temperature, rng);
}

TokenId decode(const ClusteredIndex& index, const EmbeddingMatrix& e,
               std::span<const float> h, const DecodeConfig& cfg,
               const QuantizedCentroids* stage1) {
  Rng rng(cfg.seed);
  return decode(index, e, h, cfg, rng, stage1);
}

std::vector<TokenId> decode_batch(const ClusteredIndex& index,
                                  const EmbeddingMatrix& e,
                                  const HiddenBatch& queries,
                                  const DecodeConfig& cfg,
                                  const QuantizedCentroids* stage1) {
  cfg.validate(index.clusters());
  if (queries.dim() != index.dim()) {
    throw Error(ErrorCode::DimMismatch, "query dim does not match index");
  }
  std::vector<TokenId> out(queries.count());
  parallel_for(queries.count(), 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(cfg.seed, i));
      out[i] = decode(index, e, queries.row(i), cfg, rng, stage1);
    }
  });
  return out;
}

CostModel cost_model(std::uint64_t v, std::uint64_t d, std::uint64_t c,
                     std::uint64_t p) {
  if (v == 0 || d == 0 || c == 0 || v % c != 0) {
    throw Error(ErrorCode::InvalidConfig, "cost model needs c dividing v");
  }
  if (p < 1 || p > c) {
    throw Error(ErrorCode::InvalidConfig, "probe count outside [1, c]");
  }
  CostModel m;
  m.dense_mults = v * d;
  m.flash_mults = c * d + p * (v / c) * d;
  m.ratio = static_cast<double>(m.dense_mults) / static_cast<double>(m.flash_mults);
  m.active_params_dense = m.dense_mults;
  m.active_params_flash = m.flash_mults;
  return m;
}

}  // namespace flashhead
