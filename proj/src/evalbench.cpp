#include "flashhead/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "flashhead/error.hpp"
#include "flashhead/kernels.hpp"
#include "flashhead/rng.hpp"

namespace flashhead {

namespace {

constexpr std::size_t kGenBlock = 1024;
constexpr std::size_t kQueryTile = 8;

std::vector<TokenId> top_k_of(std::span<const float> z, std::size_t k) {
  std::vector<TokenId> ids(z.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  auto cmp = [&](TokenId a, TokenId b) {
    return z[a] > z[b] || (z[a] == z[b] && a < b);
  };
  if (k < ids.size()) {
    std::nth_element(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k),
                     ids.end(), cmp);
    ids.resize(k);
  }
  std::ranges::sort(ids, cmp);
  return ids;
}

void check_k(std::size_t k, std::size_t v) {
  if (k < 1 || k > v) {
    throw Error(ErrorCode::InvalidConfig, "k must be in [1, v]");
  }
}

EmbeddingMatrix unit_rows(const EmbeddingMatrix& e) {
  return normalize_rows(e, ZeroRowPolicy::SubstituteBasis).unit;
}

}  // namespace

EmbeddingMatrix synthetic_embeddings(const SyntheticSpec& spec) {
  const std::size_t v = spec.vocab;
  const std::size_t d = spec.dim;
  if (v == 0 || d == 0 || spec.mean_group == 0) {
    throw Error(ErrorCode::InvalidConfig, "empty synthetic shape");
  }
  const std::size_t groups = std::max<std::size_t>(1, v / spec.mean_group);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix centres(groups, d);
  {
    Rng rng(spec.seed);
    for (std::size_t i = 0; i < centres.size(); ++i) {
      centres.data()[i] = static_cast<float>(rng.normal() * inv_sqrt_d);
    }
  }
  EmbeddingMatrix e{Matrix(v, d)};
  parallel_for(v, kGenBlock, [&](std::size_t begin, std::size_t end) {
    Rng rng(derive_seed(spec.seed, begin / kGenBlock + 1));
    for (std::size_t t = begin; t < end; ++t) {
      const auto g = static_cast<std::size_t>(rng.below(groups));
      const double scale = std::exp(0.1 * rng.normal());
      auto row = e.m.row(t);
      const auto centre = centres.row(g);
      for (std::size_t j = 0; j < d; ++j) {
        row[j] = static_cast<float>(
            scale * (centre[j] + spec.noise * rng.normal() * inv_sqrt_d));
      }
    }
  });
  return e;
}

HiddenBatch synthetic_queries(const EmbeddingMatrix& e, std::size_t n,
                              QueryMode mode, std::uint64_t seed) {
  const std::size_t d = e.dim();
  HiddenBatch q{Matrix(n, d)};
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = q.m.row(i);
    if (mode == QueryMode::Normal) {
      for (auto& x : row) x = static_cast<float>(rng.normal());
      continue;
    }
    const double a = rng.uniform();
    const auto ei = e.row(rng.below(e.vocab()));
    const auto ej = e.row(rng.below(e.vocab()));
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<float>(a * ei[j] + (1.0 - a) * ej[j]);
    }
  }
  return q;
}

std::vector<float> dense_logits(const EmbeddingMatrix& e,
                                std::span<const float> h, Accumulation acc) {
  if (h.size() != e.dim()) {
    throw Error(ErrorCode::DimMismatch, "hidden dim does not match embeddings");
  }
  std::vector<float> z(e.vocab());
  const std::size_t d = e.dim();
  for (std::size_t t = 0; t < z.size(); ++t) {
    const float* row = e.m.data() + t * d;
    z[t] = acc == Accumulation::F64
               ? static_cast<float>(dot_f64(row, h.data(), d))
               : dot_f32(row, h.data(), d);
  }
  return z;
}

TokenId dense_argmax(const EmbeddingMatrix& e, std::span<const float> h) {
  if (h.size() != e.dim()) {
    throw Error(ErrorCode::DimMismatch, "hidden dim does not match embeddings");
  }
  const std::size_t d = e.dim();
  TokenId best = 0;
  float best_z = -std::numeric_limits<float>::infinity();
  for (std::size_t t = 0; t < e.vocab(); ++t) {
    const float z = dot_f32(e.m.data() + t * d, h.data(), d);
    if (z > best_z) {
      best_z = z;
      best = static_cast<TokenId>(t);
    }
  }
  return best;
}

std::vector<TokenId> dense_head_oracle(const EmbeddingMatrix& e,
                                       std::span<const float> h, std::size_t k,
                                       Accumulation acc) {
  check_k(k, e.vocab());
  return top_k_of(dense_logits(e, h, acc), k);
}

TokenId quantized_dense_argmax(const QuantizedCentroids& qe,
                               std::span<const float> h) {
  if (h.size() != qe.cols) {
    throw Error(ErrorCode::DimMismatch, "hidden dim does not match quantized head");
  }
  TokenId best = 0;
  float best_z = -std::numeric_limits<float>::infinity();
  for (std::size_t t = 0; t < qe.rows; ++t) {
    const float z = quantized_row_logit(qe, t, h);
    if (z > best_z) {
      best_z = z;
      best = static_cast<TokenId>(t);
    }
  }
  return best;
}

std::vector<std::vector<TokenId>> oracle_topk(const EmbeddingMatrix& e,
                                              const HiddenBatch& queries,
                                              std::size_t k) {
  check_k(k, e.vocab());
  if (queries.dim() != e.dim()) {
    throw Error(ErrorCode::DimMismatch, "query dim does not match embeddings");
  }
  const std::size_t n = queries.count();
  const std::size_t v = e.vocab();
  const std::size_t d = e.dim();
  std::vector<std::vector<TokenId>> out(n);
  // Each embedding row is scored against a tile of queries while it is hot
  // in cache. Every logit is still a single dot_f32 call, identical to the
  // per-query path.
  parallel_for(n, kQueryTile, [&](std::size_t begin, std::size_t end) {
    const std::size_t m = end - begin;
    std::vector<float> z(m * v);
    for (std::size_t t = 0; t < v; ++t) {
      const float* row = e.m.data() + t * d;
      for (std::size_t q = 0; q < m; ++q) {
        z[q * v + t] = dot_f32(row, queries.m.data() + (begin + q) * d, d);
      }
    }
    for (std::size_t q = 0; q < m; ++q) {
      out[begin + q] = top_k_of({z.data() + q * v, v}, k);
    }
  });
  return out;
}

ContainmentReport containment_against(
    const ClusteredIndex& index, const EmbeddingMatrix& e,
    const HiddenBatch& queries, const DecodeConfig& cfg,
    const std::vector<std::vector<TokenId>>& oracle, std::size_t k,
    const QuantizedCentroids* stage1) {
  cfg.validate(index.clusters());
  check_k(k, e.vocab());
  const std::size_t n = queries.count();
  if (oracle.size() != n) {
    throw Error(ErrorCode::DimMismatch, "oracle list does not match queries");
  }
  const auto tokens = decode_batch(index, e, queries, cfg, stage1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& top = oracle[i];
    if (top.size() < k) {
      throw Error(ErrorCode::DimMismatch, "oracle list shorter than k");
    }
    const auto last = top.begin() + static_cast<std::ptrdiff_t>(k);
    hits += std::find(top.begin(), last, tokens[i]) != last;
  }
  ContainmentReport r;
  r.k = k;
  r.n = n;
  r.hits = hits;
  r.fraction = n ? static_cast<double>(r.hits) / static_cast<double>(n) : 0.0;
  r.clusters = index.clusters();
  r.probes = cfg.probes;
  r.mode = cfg.mode;
  r.quant_bits = stage1 ? stage1->bits : 0;
  return r;
}

ContainmentReport containment(const ClusteredIndex& index,
                              const EmbeddingMatrix& e,
                              const HiddenBatch& queries,
                              const DecodeConfig& cfg, std::size_t k,
                              const QuantizedCentroids* stage1) {
  return containment_against(index, e, queries, cfg, oracle_topk(e, queries, k),
                             k, stage1);
}

double drift_rate(const HiddenBatch& queries, const HeadFn& a, const HeadFn& b) {
  if (queries.count() == 0) return 0.0;
  std::vector<char> changed(queries.count(), 0);
  parallel_for(queries.count(), 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      changed[i] = a(queries.row(i)) != b(queries.row(i));
    }
  });
  return static_cast<double>(std::ranges::count(changed, char{1})) /
         static_cast<double>(queries.count());
}

LatencyStats summarize_latencies(std::vector<double> samples_ms) {
  LatencyStats s;
  if (samples_ms.empty()) return s;
  std::ranges::sort(samples_ms);
  const std::size_t n = samples_ms.size();
  s.mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) /
              static_cast<double>(n);
  s.median_ms = n % 2 ? samples_ms[n / 2]
                      : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_ms = samples_ms[std::max<std::size_t>(rank, 1) - 1];
  s.min_ms = samples_ms.front();
  return s;
}

std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(colon + 2);
      break;
    }
  }
  return model + ", threads=" + std::to_string(thread_count());
}

LatencyReport bench_heads(const HeadFn& head, const HeadFn& dense,
                          const HiddenBatch& queries, const BenchOptions& opts) {
  if (queries.count() == 0) {
    throw Error(ErrorCode::InvalidConfig, "benchmark needs at least one query");
  }
  using clock = std::chrono::steady_clock;
  volatile TokenId sink = 0;
  const std::size_t n = queries.count();
  for (std::size_t i = 0; i < opts.warmup; ++i) {
    sink = dense(queries.row(i % n));
    sink = head(queries.row(i % n));
  }
  std::vector<double> head_ms, dense_ms;
  head_ms.reserve(opts.reps);
  dense_ms.reserve(opts.reps);
  for (std::size_t r = 0; r < opts.reps; ++r) {
    const auto h = queries.row((opts.warmup + r) % n);
    auto t0 = clock::now();
    sink = dense(h);
    auto t1 = clock::now();
    sink = head(h);
    auto t2 = clock::now();
    dense_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    head_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
  }
  (void)sink;
  LatencyReport rep;
  rep.head = summarize_latencies(std::move(head_ms));
  rep.dense = summarize_latencies(std::move(dense_ms));
  rep.reps = opts.reps;
  rep.warmup = opts.warmup;
  rep.speedup_vs_dense = rep.head.median_ms > 0.0
                             ? rep.dense.median_ms / rep.head.median_ms
                             : 0.0;
  rep.hardware = hardware_descriptor();
  return rep;
}

LatencyReport bench_tpot_head(const EmbeddingMatrix& e,
                              const ClusteredIndex& index,
                              const HiddenBatch& queries,
                              const DecodeConfig& cfg, const BenchOptions& opts,
                              const QuantizedCentroids* stage1) {
  if (opts.reps < 30 || opts.warmup < 10) {
    throw Error(ErrorCode::InvalidConfig, "benchmark needs reps >= 30 and warmup >= 10");
  }
  cfg.validate(index.clusters());
  Rng rng(cfg.seed);
  const HeadFn head = [&](std::span<const float> h) {
    return decode(index, e, h, cfg, rng, stage1);
  };
  const HeadFn dense = [&](std::span<const float> h) { return dense_argmax(e, h); };
  return bench_heads(head, dense, queries, opts);
}

BalanceAblation ablation_balance(const EmbeddingMatrix& e,
                                 ClusteredIndex balanced,
                                 ClusteredIndex unbalanced,
                                 const HiddenBatch& queries,
                                 const DecodeConfig& cfg, std::size_t k,
                                 const BenchOptions& bench) {
  BalanceAblation out;
  out.balanced = std::move(balanced);
  out.unbalanced = std::move(unbalanced);
  const auto oracle = oracle_topk(e, queries, k);
  out.balanced_containment =
      containment_against(out.balanced, e, queries, cfg, oracle, k);
  out.unbalanced_containment =
      containment_against(out.unbalanced, e, queries, cfg, oracle, k);
  out.balanced_latency = bench_tpot_head(e, out.balanced, queries, cfg, bench);
  out.unbalanced_latency = bench_tpot_head(e, out.unbalanced, queries, cfg, bench);
  return out;
}

BalanceAblation ablation_balance(const EmbeddingMatrix& e,
                                 const ClusterOptions& opts,
                                 const HiddenBatch& queries,
                                 const DecodeConfig& cfg, std::size_t k,
                                 const BenchOptions& bench) {
  if (opts.clusters == 0 || e.vocab() % opts.clusters != 0) {
    throw Error(ErrorCode::InvalidOptions, "ablation needs c dividing v");
  }
  const auto unit = unit_rows(e);
  ClusterOptions bal = opts;
  bal.balanced = true;
  ClusterOptions unbal = opts;
  unbal.balanced = false;
  return ablation_balance(e, spherical_kmeans(unit, bal),
                          spherical_kmeans(unit, unbal), queries, cfg, k, bench);
}

SeedRobustness seed_robustness(const EmbeddingMatrix& e,
                               const ClusterOptions& opts,
                               std::span<const std::uint64_t> seeds,
                               const HiddenBatch& queries,
                               const DecodeConfig& cfg, std::size_t k) {
  if (seeds.size() < 2) {
    throw Error(ErrorCode::InvalidConfig, "seed robustness needs >= 2 seeds");
  }
  const auto unit = unit_rows(e);
  const auto oracle = oracle_topk(e, queries, k);
  SeedRobustness out;
  out.seeds.assign(seeds.begin(), seeds.end());
  for (auto seed : seeds) {
    ClusterOptions o = opts;
    o.seed = seed;
    const auto index = spherical_kmeans(unit, o);
    out.fractions.push_back(
        containment_against(index, e, queries, cfg, oracle, k).fraction);
  }
  const double n = static_cast<double>(out.fractions.size());
  out.mean = std::accumulate(out.fractions.begin(), out.fractions.end(), 0.0) / n;
  double ss = 0.0;
  for (double f : out.fractions) ss += (f - out.mean) * (f - out.mean);
  out.stddev = std::sqrt(ss / (n - 1.0));
  return out;
}

std::vector<SweepRow> sweep(const EmbeddingMatrix& e,
                            const ClusterOptions& base,
                            std::span<const std::size_t> cluster_counts,
                            std::span<const std::size_t> probe_counts,
                            const HiddenBatch& queries, std::size_t k,
                            const BenchOptions& bench) {
  const auto unit = unit_rows(e);
  const auto oracle = oracle_topk(e, queries, k);
  std::vector<SweepRow> rows;
  for (auto c : cluster_counts) {
    ClusterOptions o = base;
    o.clusters = c;
    const auto index = spherical_kmeans(unit, o);
    for (auto p : probe_counts) {
      DecodeConfig cfg;
      cfg.probes = p;
      SweepRow row;
      row.clusters = c;
      row.probes = p;
      row.cluster_size = index.cluster_size;
      row.containment = containment_against(index, e, queries, cfg, oracle, k).fraction;
      if (bench.reps > 0) row.latency = bench_tpot_head(e, index, queries, cfg, bench);
      if (e.vocab() % c == 0) {
        row.cost_ratio = cost_model(e.vocab(), e.dim(), c, p).ratio;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace flashhead
