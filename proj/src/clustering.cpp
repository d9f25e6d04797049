#include "flashhead/clustering.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <string>

#include "flashhead/error.hpp"
#include "flashhead/kernels.hpp"
#include "flashhead/rng.hpp"

namespace flashhead {

namespace {

using RowMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

// Token block for the assignment GEMM. Fixed so results do not depend on
// the number of worker threads.
constexpr std::size_t kAssignBlock = 2048;
constexpr std::size_t kReduceBlock = 4096;

bool better(float sim_a, std::uint32_t id_a, float sim_b, std::uint32_t id_b) {
  return sim_a > sim_b || (sim_a == sim_b && id_a < id_b);
}

/// Output of one assignment step: nearest centroid per token plus an
/// ordered preference list of length `width`.
struct Assignment {
  std::size_t width = 0;
  std::vector<std::uint32_t> best;
  std::vector<float> best_sim;
  std::vector<std::uint32_t> pref_ids;
  std::vector<float> pref_sims;
  // Listed entries per token, and an upper bound on the similarity of any
  // cluster missing from the list.
  std::vector<std::uint32_t> pref_len;
  std::vector<float> pref_floor;
};

// Inserts (k, s) into a list sorted by better(); the list has room.
void insert_ranked(std::uint32_t* ids, float* vals, std::size_t& len,
                   std::uint32_t k, float s) {
  std::size_t pos = len++;
  while (pos > 0 && better(s, k, vals[pos - 1], ids[pos - 1])) {
    vals[pos] = vals[pos - 1];
    ids[pos] = ids[pos - 1];
    --pos;
  }
  vals[pos] = s;
  ids[pos] = k;
}

void assign_tokens(const EmbeddingMatrix& unit, const Matrix& centroids,
                   std::size_t width, Assignment& out) {
  const std::size_t v = unit.vocab();
  const std::size_t d = unit.dim();
  const std::size_t c = centroids.rows();
  out.width = width;
  out.best.assign(v, 0);
  out.best_sim.assign(v, 0.0f);
  out.pref_ids.assign(v * width, 0);
  out.pref_sims.assign(v * width, 0.0f);
  out.pref_len.assign(v, static_cast<std::uint32_t>(width));
  out.pref_floor.assign(v, -std::numeric_limits<float>::infinity());

  const ConstRowMap cmap(centroids.data(), static_cast<Eigen::Index>(c),
                         static_cast<Eigen::Index>(d));
  parallel_for(v, kAssignBlock, [&](std::size_t begin, std::size_t end) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    const ConstRowMap block(unit.m.data() + begin * d, rows,
                            static_cast<Eigen::Index>(d));
    thread_local RowMatrix sims;
    sims.resize(rows, static_cast<Eigen::Index>(c));
    sims.noalias() = block * cmap.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t t = begin + static_cast<std::size_t>(r);
      const float* s = sims.data() + r * static_cast<Eigen::Index>(c);
      std::uint32_t* ids = out.pref_ids.data() + t * width;
      float* vals = out.pref_sims.data() + t * width;
      std::size_t filled = 0;
      std::uint32_t best = 0;
      for (std::uint32_t k = 0; k < c; ++k) {
        if (s[k] > s[best]) best = k;
        if (width == 0) continue;
        if (filled == width && !better(s[k], k, vals[width - 1], ids[width - 1])) {
          continue;
        }
        std::size_t pos = filled < width ? filled++ : width - 1;
        while (pos > 0 && better(s[k], k, vals[pos - 1], ids[pos - 1])) {
          vals[pos] = vals[pos - 1];
          ids[pos] = ids[pos - 1];
          --pos;
        }
        vals[pos] = s[k];
        ids[pos] = k;
      }
      out.best[t] = best;
      out.best_sim[t] = s[best];
      if (width > 0 && width < c) out.pref_floor[t] = vals[width - 1];
    }
  });
}

// Refreshes a balanced-mode pass after the centroids in `changed` moved,
// without redoing the full GEMM.
void patch_assignment(const EmbeddingMatrix& unit, const Matrix& centroids,
                      std::span<const std::uint32_t> changed, Assignment& a) {
  const std::size_t v = unit.vocab();
  const std::size_t c = centroids.rows();
  const std::size_t width = a.width;
  parallel_for(v, kReduceBlock, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      std::uint32_t* ids = a.pref_ids.data() + t * width;
      float* vals = a.pref_sims.data() + t * width;
      float& floor = a.pref_floor[t];
      std::size_t len = 0;
      for (std::size_t i = 0; i < a.pref_len[t]; ++i) {
        if (std::ranges::find(changed, ids[i]) != changed.end()) continue;
        ids[len] = ids[i];
        vals[len] = vals[i];
        ++len;
      }
      for (auto k : changed) {
        const float s = dot_f32(unit.row(t), centroids.row(k));
        if (!(s > floor)) continue;
        if (len == width) {
          if (!better(s, k, vals[width - 1], ids[width - 1])) {
            floor = std::max(floor, s);
            continue;
          }
          floor = std::max(floor, vals[width - 1]);
          --len;
        }
        insert_ranked(ids, vals, len, k, s);
      }
      if (len == 0) {
        // Everything listed moved away: rescan all clusters.
        for (std::uint32_t k = 0; k < c; ++k) {
          const float s = dot_f32(unit.row(t), centroids.row(k));
          if (len == width) {
            if (!better(s, k, vals[width - 1], ids[width - 1])) continue;
            --len;
          }
          insert_ranked(ids, vals, len, k, s);
        }
        floor = width < c ? vals[width - 1] : -std::numeric_limits<float>::infinity();
      }
      a.pref_len[t] = static_cast<std::uint32_t>(len);
      a.best[t] = ids[0];
      a.best_sim[t] = vals[0];
    }
  });
}

/// Preference lists from the assignment GEMM; off-list similarities are
/// computed on demand.
class PreferenceSimilarity final : public SimilaritySource {
 public:
  PreferenceSimilarity(const Assignment& a, const EmbeddingMatrix& unit,
                       const Matrix& centroids)
      : a_(a), unit_(unit), centroids_(centroids) {}

  std::size_t clusters() const override { return centroids_.rows(); }

  float similarity(TokenId token, std::uint32_t cluster) const override {
    const std::size_t base = static_cast<std::size_t>(token) * a_.width;
    for (std::size_t i = 0; i < a_.pref_len[token]; ++i) {
      if (a_.pref_ids[base + i] == cluster) return a_.pref_sims[base + i];
    }
    return dot_f32(unit_.row(token), centroids_.row(cluster));
  }

  std::span<const std::uint32_t> ranked(TokenId token) const override {
    return {a_.pref_ids.data() + static_cast<std::size_t>(token) * a_.width,
            a_.pref_len[token]};
  }

 private:
  const Assignment& a_;
  const EmbeddingMatrix& unit_;
  const Matrix& centroids_;
};

Matrix init_uniform(const EmbeddingMatrix& unit, std::size_t c, Rng& rng) {
  const std::size_t v = unit.vocab();
  std::vector<std::size_t> perm(v);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Matrix out(c, unit.dim());
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(v - k));
    std::swap(perm[k], perm[j]);
    std::ranges::copy(unit.row(perm[k]), out.row(k).begin());
  }
  return out;
}

// k-means++ with D(x) = 1 - cos(x, nearest chosen centroid).
Matrix init_kmeanspp(const EmbeddingMatrix& unit, std::size_t c, Rng& rng) {
  const std::size_t v = unit.vocab();
  Matrix out(c, unit.dim());
  std::vector<double> dist(v, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(v, 0);
  std::size_t pick = static_cast<std::size_t>(rng.below(v));
  for (std::size_t k = 0; k < c; ++k) {
    chosen[pick] = 1;
    std::ranges::copy(unit.row(pick), out.row(k).begin());
    if (k + 1 == c) break;
    const auto centre = out.row(k);
    parallel_for(v, kReduceBlock, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const double dd = std::max(0.0, 1.0 - static_cast<double>(dot_f32(unit.row(i), centre)));
        dist[i] = std::min(dist[i], dd);
      }
    });
    double total = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      if (!chosen[i]) total += dist[i] * dist[i];
    }
    if (total <= 0.0) {
      // Every remaining point coincides with a centroid.
      pick = static_cast<std::size_t>(
          std::ranges::find(chosen, char{0}) - chosen.begin());
      continue;
    }
    const double target = rng.uniform() * total;
    double run = 0.0;
    std::size_t last = v;
    pick = v;
    for (std::size_t i = 0; i < v; ++i) {
      if (chosen[i]) continue;
      const double w = dist[i] * dist[i];
      if (w <= 0.0) continue;
      last = i;
      run += w;
      if (run >= target) {
        pick = i;
        break;
      }
    }
    if (pick == v) pick = last;
  }
  return out;
}

// Mean direction of each cluster; clusters without members keep their
// previous centroid.
void update_centroids(const EmbeddingMatrix& unit,
                      std::span<const std::uint32_t> assignment,
                      Matrix& centroids) {
  const std::size_t c = centroids.rows();
  const std::size_t d = centroids.cols();
  std::vector<double> sums(c * d, 0.0);
  std::vector<std::size_t> counts(c, 0);
  for (std::size_t t = 0; t < assignment.size(); ++t) {
    const std::uint32_t k = assignment[t];
    ++counts[k];
    double* acc = sums.data() + static_cast<std::size_t>(k) * d;
    const auto row = unit.row(t);
    for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] == 0) continue;
    const double* acc = sums.data() + k * d;
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += acc[j] * acc[j];
    norm = std::sqrt(norm);
    if (norm <= 0.0) continue;
    auto row = centroids.row(k);
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<float>(acc[j] / norm);
    }
  }
}

double objective_of(const EmbeddingMatrix& unit,
                    std::span<const std::uint32_t> assignment,
                    const Matrix& centroids) {
  const std::size_t v = assignment.size();
  const std::size_t chunks = (v + kReduceBlock - 1) / kReduceBlock;
  std::vector<double> partial(chunks, 0.0);
  parallel_for(v, kReduceBlock, [&](std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      s += 1.0 - dot_f64(unit.row(i), centroids.row(assignment[i]));
    }
    partial[b / kReduceBlock] = s;
  });
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

// An empty cluster takes the worst-assigned token that is
// not the last member of its own cluster.
std::vector<std::uint32_t> repair_empty_clusters(
    const EmbeddingMatrix& unit, const Assignment& a,
    std::vector<std::uint32_t>& assignment, Matrix& centroids) {
  const std::size_t c = centroids.rows();
  std::vector<std::size_t> counts(c, 0);
  for (auto k : assignment) ++counts[k];
  std::vector<std::uint32_t> reseeded;
  if (std::ranges::find(counts, std::size_t{0}) == counts.end()) return reseeded;

  std::vector<TokenId> order(assignment.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::ranges::stable_sort(order, [&](TokenId x, TokenId y) {
    return a.best_sim[x] < a.best_sim[y];
  });
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] != 0) continue;
    while (cursor < order.size() && counts[assignment[order[cursor]]] <= 1) {
      ++cursor;
    }
    if (cursor == order.size()) break;
    const TokenId t = order[cursor++];
    --counts[assignment[t]];
    assignment[t] = static_cast<std::uint32_t>(k);
    counts[k] = 1;
    std::ranges::copy(unit.row(t), centroids.row(k).begin());
    reseeded.push_back(static_cast<std::uint32_t>(k));
  }
  return reseeded;
}

ClusteredIndex build_index(std::span<const std::uint32_t> assignment,
                           Matrix centroids, std::size_t v) {
  const std::size_t c = centroids.rows();
  std::vector<std::vector<TokenId>> rows(c);
  for (std::size_t t = 0; t < v; ++t) {
    rows[assignment[t]].push_back(static_cast<TokenId>(t));
  }
  std::size_t b = 0;
  for (const auto& r : rows) b = std::max(b, r.size());
  ClusteredIndex idx;
  idx.centroids = std::move(centroids);
  idx.cluster_size = b;
  idx.vocab = v;
  idx.balanced = b * c == v;
  idx.c2t.assign(c * b, kPadToken);
  for (std::size_t k = 0; k < c; ++k) {
    std::ranges::copy(rows[k], idx.c2t.begin() + static_cast<std::ptrdiff_t>(k * b));
  }
  return idx;
}

}  // namespace

std::size_t ClusteredIndex::members(std::size_t k) const noexcept {
  const auto r = row(k);
  return static_cast<std::size_t>(
      std::ranges::count_if(r, [](TokenId t) { return t != kPadToken; }));
}

void check_index(const ClusteredIndex& index, double norm_tol) {
  const std::size_t c = index.clusters();
  const std::size_t b = index.cluster_size;
  const std::size_t v = index.vocab;
  auto fail = [](const std::string& msg) {
    throw Error(ErrorCode::InvalidOptions, "index invariant violated: " + msg);
  };
  if (c == 0 || b == 0 || v == 0) fail("empty index");
  if (index.c2t.size() != c * b) fail("C2T shape");
  if (index.balanced && c * b != v) fail("balanced index with c*b != v");
  std::vector<char> seen(v, 0);
  std::size_t covered = 0;
  for (std::size_t k = 0; k < c; ++k) {
    for (TokenId t : index.row(k)) {
      if (t == kPadToken) {
        if (index.balanced) fail("pad entry in balanced index");
        continue;
      }
      if (t >= v) fail("token id out of range");
      if (seen[t]) fail("token " + std::to_string(t) + " appears twice");
      seen[t] = 1;
      ++covered;
    }
  }
  if (covered != v) fail("C2T does not cover the vocabulary");
  for (std::size_t k = 0; k < c; ++k) {
    const double n = std::sqrt(dot_f64(index.centroids.row(k), index.centroids.row(k)));
    if (std::abs(n - 1.0) > norm_tol) {
      fail("centroid " + std::to_string(k) + " has norm " + std::to_string(n));
    }
  }
}

NormalizedRows normalize_rows(const EmbeddingMatrix& e, ZeroRowPolicy policy) {
  NormalizedRows out{e, {}};
  const std::size_t d = e.dim();
  for (std::size_t i = 0; i < e.vocab(); ++i) {
    auto row = out.unit.m.row(i);
    const double norm = std::sqrt(dot_f64(row, row));
    if (norm == 0.0) {
      if (policy == ZeroRowPolicy::Throw) {
        throw Error(ErrorCode::ZeroNormRow,
                    "row " + std::to_string(i) + " has zero norm", i);
      }
      std::ranges::fill(row, 0.0f);
      row[0] = 1.0f;
      out.zero_rows.push_back(i);
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<float>(row[j] / norm);
    }
  }
  return out;
}

DenseSimilarity::DenseSimilarity(Matrix sims)
    : sims_(std::move(sims)), order_(sims_.rows() * sims_.cols()) {
  const std::size_t c = sims_.cols();
  for (std::size_t t = 0; t < sims_.rows(); ++t) {
    auto first = order_.begin() + static_cast<std::ptrdiff_t>(t * c);
    std::iota(first, first + static_cast<std::ptrdiff_t>(c), std::uint32_t{0});
    const auto row = sims_.row(t);
    std::stable_sort(first, first + static_cast<std::ptrdiff_t>(c),
                     [&](std::uint32_t x, std::uint32_t y) {
                       return row[x] > row[y];
                     });
  }
}

std::span<const std::uint32_t> DenseSimilarity::ranked(TokenId token) const {
  const std::size_t c = sims_.cols();
  return {order_.data() + static_cast<std::size_t>(token) * c, c};
}

BalanceResult balance_assignment(std::span<const std::uint32_t> assignment,
                                 const SimilaritySource& sims,
                                 std::size_t capacity) {
  const std::size_t c = sims.clusters();
  const std::size_t v = assignment.size();
  if (capacity * c != v) {
    throw Error(ErrorCode::InvalidOptions,
                "capacity * clusters must equal the token count");
  }
  BalanceResult out{{assignment.begin(), assignment.end()}, {}};
  std::vector<std::size_t> counts(c, 0);
  std::vector<std::vector<TokenId>> members(c);
  for (std::size_t t = 0; t < v; ++t) {
    const auto k = assignment[t];
    if (k >= c) throw Error(ErrorCode::InvalidOptions, "cluster id out of range");
    ++counts[k];
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] > capacity) members[k].reserve(counts[k]);
  }
  for (std::size_t t = 0; t < v; ++t) {
    const auto k = assignment[t];
    if (counts[k] > capacity) members[k].push_back(static_cast<TokenId>(t));
  }

  auto best_free = [&](TokenId t) -> std::uint32_t {
    const auto ranked = sims.ranked(t);
    for (auto k : ranked) {
      if (counts[k] < capacity) return k;
    }
    // Preference list exhausted: scan every cluster with room.
    std::uint32_t best = 0;
    float best_sim = -std::numeric_limits<float>::infinity();
    bool found = false;
    for (std::uint32_t k = 0; k < c; ++k) {
      if (counts[k] >= capacity) continue;
      const float s = sims.similarity(t, k);
      if (!found || better(s, k, best_sim, best)) {
        best = k;
        best_sim = s;
        found = true;
      }
    }
    return best;
  };

  for (std::uint32_t k = 0; k < c; ++k) {
    if (counts[k] <= capacity) continue;
    auto& mem = members[k];
    std::vector<std::pair<float, TokenId>> keyed;
    keyed.reserve(mem.size());
    for (TokenId t : mem) keyed.emplace_back(sims.similarity(t, k), t);
    std::ranges::sort(keyed);  // lowest similarity, then lowest token, first
    const std::size_t evict = counts[k] - capacity;
    for (std::size_t i = 0; i < evict; ++i) {
      const TokenId t = keyed[i].second;
      --counts[k];
      const std::uint32_t to = best_free(t);
      ++counts[to];
      out.assignment[t] = to;
      out.moves.push_back({t, k, to});
    }
  }
  return out;
}

ClusteredIndex spherical_kmeans(const EmbeddingMatrix& unit,
                                const ClusterOptions& opts) {
  const std::size_t v = unit.vocab();
  const std::size_t c = opts.clusters;
  if (v == 0 || unit.dim() == 0) {
    throw Error(ErrorCode::InvalidOptions, "empty embedding matrix");
  }
  if (c == 0 || c > v) {
    throw Error(ErrorCode::InvalidOptions,
                "cluster count must be in [1, v], got " + std::to_string(c));
  }
  if (opts.balanced && v % c != 0) {
    throw Error(ErrorCode::InvalidOptions,
                std::to_string(c) + " clusters do not divide v = " +
                    std::to_string(v));
  }
  if (opts.max_iterations < 1 || !(opts.tolerance >= 0.0)) {
    throw Error(ErrorCode::InvalidOptions, "bad iteration budget or tolerance");
  }
  for (std::size_t i = 0; i < v; ++i) {
    const double n = dot_f64(unit.row(i), unit.row(i));
    if (std::abs(n - 1.0) > 1e-3) {
      throw Error(ErrorCode::InvalidOptions,
                  "row " + std::to_string(i) + " is not unit norm");
    }
  }

  Rng rng(opts.seed);
  Matrix centroids = opts.init == InitMethod::KMeansPlusPlus
                         ? init_kmeanspp(unit, c, rng)
                         : init_uniform(unit, c, rng);
  const std::size_t width =
      opts.balanced ? std::min(c, std::max<std::size_t>(opts.preference_list, 1)) : 0;

  Assignment pass;
  std::vector<std::uint32_t> assignment;
  // Recent assignments; greedy balancing can settle into a short cycle.
  std::deque<std::vector<std::uint32_t>> recent;
  constexpr std::size_t kCycleWindow = 8;
  // The balanced objective is not monotone; a run whose best value has not
  // improved by `tolerance` (relative) for kPatience iterations has stalled.
  constexpr int kPatience = 10;
  double best_obj = 0.0;
  int since_best = 0;
  IndexMeta meta;
  meta.seed = opts.seed;
  for (int it = 0; it < opts.max_iterations; ++it) {
    assign_tokens(unit, centroids, width, pass);
    if (opts.balanced) {
      // Clusters that win no token before balancing get reseeded, and the
      // pass is patched to match the new centroids.
      for (int round = 0; round < 3; ++round) {
        assignment = pass.best;
        const auto moved = repair_empty_clusters(unit, pass, assignment, centroids);
        if (moved.empty()) break;
        patch_assignment(unit, centroids, moved, pass);
      }
      PreferenceSimilarity sims(pass, unit, centroids);
      assignment = balance_assignment(pass.best, sims, v / c).assignment;
    } else {
      assignment = pass.best;
      repair_empty_clusters(unit, pass, assignment, centroids);
    }
    update_centroids(unit, assignment, centroids);
    const double obj = objective_of(unit, assignment, centroids);
    meta.objective_trace.push_back(obj);
    meta.iterations = static_cast<std::uint32_t>(it + 1);

    bool converged = obj <= 0.0 || std::ranges::find(recent, assignment) != recent.end();
    if (!converged && meta.objective_trace.size() >= 2) {
      const double prev = meta.objective_trace[meta.objective_trace.size() - 2];
      converged = std::abs(prev - obj) < opts.tolerance * std::abs(prev);
    }
    if (it == 0 || obj < best_obj - opts.tolerance * std::abs(best_obj)) {
      best_obj = obj;
      since_best = 0;
    } else if (++since_best >= kPatience) {
      converged = true;
    }
    if (converged) break;
    recent.push_back(assignment);
    if (recent.size() > kCycleWindow) recent.pop_front();
  }

  ClusteredIndex idx = build_index(assignment, std::move(centroids), v);
  idx.meta = std::move(meta);
  return idx;
}

double clustering_objective(const EmbeddingMatrix& unit,
                            const ClusteredIndex& index) {
  double total = 0.0;
  for (std::size_t k = 0; k < index.clusters(); ++k) {
    const auto centre = index.centroids.row(k);
    for (TokenId t : index.row(k)) {
      if (t == kPadToken) continue;
      total += 1.0 - dot_f64(unit.row(t), centre);
    }
  }
  return total;
}

std::vector<std::uint32_t> assignment_of(const ClusteredIndex& index) {
  std::vector<std::uint32_t> out(index.vocab, 0);
  for (std::size_t k = 0; k < index.clusters(); ++k) {
    for (TokenId t : index.row(k)) {
      if (t != kPadToken) out[t] = static_cast<std::uint32_t>(k);
    }
  }
  return out;
}

}  // namespace flashhead
