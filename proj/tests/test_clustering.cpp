#include <doctest.h>

#include <map>
#include <numeric>
#include <set>

#include "fixtures.hpp"
#include "flashhead/error.hpp"
#include "flashhead/evalbench.hpp"
#include "flashhead/kernels.hpp"

using namespace flashhead;

namespace {

using Partition = std::vector<std::vector<TokenId>>;

// Centroid-based objective computed from scratch in double precision.
double partition_objective(const EmbeddingMatrix& unit, const Partition& part) {
  double total = 0.0;
  for (const auto& g : part) {
    std::vector<double> m(unit.dim(), 0.0);
    for (auto t : g)
      for (std::size_t i = 0; i < unit.dim(); ++i) m[i] += unit.row(t)[i];
    double n = 0.0;
    for (auto x : m) n += x * x;
    n = std::sqrt(n);
    for (auto t : g) {
      double dot = 0.0;
      for (std::size_t i = 0; i < unit.dim(); ++i) dot += unit.row(t)[i] * m[i] / n;
      total += 1.0 - dot;
    }
  }
  return total;
}

// Every split of `items` into groups of two.
void pairings(std::vector<TokenId> items, Partition& cur, std::vector<Partition>& out) {
  if (items.empty()) {
    out.push_back(cur);
    return;
  }
  const TokenId first = items.front();
  for (std::size_t j = 1; j < items.size(); ++j) {
    std::vector<TokenId> rest;
    for (std::size_t i = 1; i < items.size(); ++i)
      if (i != j) rest.push_back(items[i]);
    cur.push_back({first, items[j]});
    pairings(rest, cur, out);
    cur.pop_back();
  }
}

std::set<std::set<TokenId>> as_sets(const ClusteredIndex& idx) {
  std::set<std::set<TokenId>> s;
  for (std::size_t k = 0; k < idx.clusters(); ++k) {
    std::set<TokenId> g;
    for (auto t : idx.row(k))
      if (t != kPadToken) g.insert(t);
    s.insert(g);
  }
  return s;
}

void check_exact_cover(const ClusteredIndex& idx) {
  std::vector<TokenId> all;
  for (auto t : idx.c2t)
    if (t != kPadToken) all.push_back(t);
  std::sort(all.begin(), all.end());
  REQUIRE(all.size() == idx.vocab);
  for (std::size_t i = 0; i < all.size(); ++i) REQUIRE(all[i] == i);
}

EmbeddingMatrix unit_of(const EmbeddingMatrix& e) { return normalize_rows(e).unit; }

}  // namespace

TEST_CASE("normalize_rows scales to unit length") {
  const EmbeddingMatrix e{Matrix(2, 2, {3, 4, 1, 0})};
  const auto r = normalize_rows(e);
  CHECK(r.unit.row(0)[0] == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(r.unit.row(0)[1] == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(r.unit.row(1)[0] == 1.0f);
  CHECK(r.unit.row(1)[1] == 0.0f);
  CHECK(r.zero_rows.empty());
}

TEST_CASE("zero rows throw or are replaced by e_1") {
  const EmbeddingMatrix e{Matrix(3, 2, {1, 1, 0, 0, 2, 0})};
  try {
    normalize_rows(e);
    FAIL("expected ZeroNormRow");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::ZeroNormRow);
    CHECK(err.index() == 1);
  }
  const auto r = normalize_rows(e, ZeroRowPolicy::SubstituteBasis);
  CHECK(r.zero_rows == std::vector<std::size_t>{1});
  CHECK(r.unit.row(1)[0] == 1.0f);
  CHECK(r.unit.row(1)[1] == 0.0f);
}

TEST_CASE("F8 brute force: adjacent pairs minimize the objective") {
  const auto e = fixtures::f8();
  std::vector<Partition> all;
  Partition cur;
  pairings({0, 1, 2, 3, 4, 5, 6, 7}, cur, all);
  REQUIRE(all.size() == 105);

  double best = 1e9;
  std::vector<std::size_t> argbest;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const double obj = partition_objective(e, all[i]);
    if (obj < best - 1e-12) {
      best = obj;
      argbest = {i};
    } else if (std::abs(obj - best) <= 1e-12) {
      argbest.push_back(i);
    }
  }
  const double expected = 8.0 * (1.0 - std::cos(std::numbers::pi / 8.0));
  CHECK(best == doctest::Approx(expected).epsilon(1e-7));
  // The two rotations of the adjacent-pair partition.
  CHECK(argbest.size() == 2);

  const std::set<std::set<TokenId>> rot_a{{0, 1}, {2, 3}, {4, 5}, {6, 7}};
  const std::set<std::set<TokenId>> rot_b{{1, 2}, {3, 4}, {5, 6}, {7, 0}};
  for (auto i : argbest) {
    std::set<std::set<TokenId>> got;
    for (const auto& g : all[i]) got.insert({g.begin(), g.end()});
    CHECK((got == rot_a || got == rot_b));
  }

  // Exact F8 is full of cosine ties, and greedy balancing from tied starts
  // can settle in a fixed point with two coincident centroids. Every build
  // must still be a valid cover no better than the brute-force optimum, and
  // the optimum must be reachable.
  int optimal = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    ClusterOptions o;
    o.clusters = 4;
    o.seed = seed;
    o.init = seed % 2 ? InitMethod::UniformRandom : InitMethod::KMeansPlusPlus;
    const auto idx = spherical_kmeans(e, o);
    check_index(idx);
    const double obj = clustering_objective(e, idx);
    CHECK(obj >= expected - 1e-6);
    const auto got = as_sets(idx);
    if (got == rot_a || got == rot_b) {
      ++optimal;
      CHECK(obj == doctest::Approx(expected).epsilon(1e-6));
    }
  }
  CHECK(optimal > 0);
}

TEST_CASE("F8 with broken ties: every seed finds adjacent pairs") {
  Matrix m(8, 2);
  for (std::size_t k = 0; k < 8; ++k) {
    const double a = static_cast<double>(k) * std::numbers::pi / 4.0 + 0.03 * std::sin(7.0 * k + 1);
    m(k, 0) = static_cast<float>(std::cos(a));
    m(k, 1) = static_cast<float>(std::sin(a));
  }
  const EmbeddingMatrix e{m};
  const std::set<std::set<TokenId>> rot_a{{0, 1}, {2, 3}, {4, 5}, {6, 7}};
  const std::set<std::set<TokenId>> rot_b{{1, 2}, {3, 4}, {5, 6}, {7, 0}};
  const double best = std::min(partition_objective(e, {{0, 1}, {2, 3}, {4, 5}, {6, 7}}),
                               partition_objective(e, {{1, 2}, {3, 4}, {5, 6}, {7, 0}}));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    ClusterOptions o;
    o.clusters = 4;
    o.seed = seed;
    const auto idx = spherical_kmeans(e, o);
    const auto got = as_sets(idx);
    CHECK((got == rot_a || got == rot_b));
    CHECK(clustering_objective(e, idx) >= best - 1e-6);
  }
}

TEST_CASE("clustering_objective examples") {
  const auto e = fixtures::f8();
  auto singles = fixtures::index_from_groups(e, fixtures::contiguous_groups(8, 1));
  CHECK(std::abs(clustering_objective(e, singles)) < 1e-6);

  const auto pairs = fixtures::index_from_groups(e, fixtures::contiguous_groups(8, 2));
  const double opt = clustering_objective(e, pairs);
  CHECK(opt == doctest::Approx(0.6089637).epsilon(1e-6));

  auto one = fixtures::index_from_groups(e, {{0, 1, 2, 3, 4, 5, 6, 7}});
  const double a = std::numbers::pi / 8.0;
  one.centroids(0, 0) = static_cast<float>(std::cos(a));
  one.centroids(0, 1) = static_cast<float>(std::sin(a));
  const double lumped = clustering_objective(e, one);
  CHECK(lumped == doctest::Approx(8.0).epsilon(1e-6));
  CHECK(lumped > opt);
}

TEST_CASE("v = c gives singleton clusters with zero objective") {
  const auto e = unit_of(fixtures::random_embeddings(16, 5, 11));
  ClusterOptions o;
  o.clusters = 16;
  const auto idx = spherical_kmeans(e, o);
  check_exact_cover(idx);
  CHECK(idx.cluster_size == 1);
  for (std::size_t k = 0; k < 16; ++k) {
    const auto t = idx.row(k)[0];
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(idx.centroids(k, i) == doctest::Approx(e.row(t)[i]).epsilon(1e-6));
    }
  }
  CHECK(std::abs(clustering_objective(e, idx)) < 1e-6);
  CHECK(std::abs(idx.meta.objective_trace.back()) < 1e-6);
}

TEST_CASE("invalid options are rejected") {
  const auto e = fixtures::f8();
  ClusterOptions o;
  o.clusters = 3;
  CHECK_THROWS_AS(spherical_kmeans(e, o), Error);
  o.clusters = 9;
  o.balanced = false;
  CHECK_THROWS_AS(spherical_kmeans(e, o), Error);
  o.clusters = 0;
  CHECK_THROWS_AS(spherical_kmeans(e, o), Error);
  o.clusters = 4;
  o.max_iterations = 0;
  CHECK_THROWS_AS(spherical_kmeans(e, o), Error);

  const EmbeddingMatrix raw{Matrix(2, 2, {3, 4, 1, 0})};
  o.max_iterations = 5;
  o.clusters = 1;
  try {
    spherical_kmeans(raw, o);
    FAIL("non-unit rows accepted");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::InvalidOptions);
  }
}

TEST_CASE("balance_assignment: counting forces the two weakest out") {
  // 4 tokens, all in cluster 0, capacity 2.
  Matrix sims(4, 2, {0.9f, 0.1f, 0.2f, 0.3f, 0.8f, 0.5f, 0.1f, 0.4f});
  const DenseSimilarity src(sims);
  const std::vector<std::uint32_t> a{0, 0, 0, 0};
  const auto r = balance_assignment(a, src, 2);
  CHECK(r.assignment == std::vector<std::uint32_t>{0, 1, 0, 1});
  REQUIRE(r.moves.size() == 2);
  CHECK(r.moves[0].token == 3);
  CHECK(r.moves[1].token == 1);
}

TEST_CASE("balance_assignment leaves balanced input alone") {
  Matrix sims = fixtures::gaussian(6, 3, 5);
  const DenseSimilarity src(sims);
  const std::vector<std::uint32_t> a{2, 0, 1, 1, 0, 2};
  const auto r = balance_assignment(a, src, 2);
  CHECK(r.assignment == a);
  CHECK(r.moves.empty());
}

TEST_CASE("balance_assignment ties evict the lower token id first") {
  Matrix sims(3, 3, {0.5f, 0.0f, 0.0f, 0.5f, 0.0f, 0.0f, 0.5f, 0.0f, 0.0f});
  const DenseSimilarity src(sims);
  const auto r = balance_assignment(std::vector<std::uint32_t>{0, 0, 0}, src, 1);
  REQUIRE(r.moves.size() == 2);
  CHECK(r.moves[0].token == 0);
  CHECK(r.moves[0].to == 1);
  CHECK(r.moves[1].token == 1);
  CHECK(r.moves[1].to == 2);
  CHECK(r.assignment == std::vector<std::uint32_t>{1, 2, 0});
}

TEST_CASE("F8 with a three-member cluster evicts its lowest-cosine member") {
  const auto e = fixtures::f8();
  const auto idx = fixtures::index_from_groups(e, fixtures::contiguous_groups(8, 2));
  Matrix sims(8, 4);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t k = 0; k < 4; ++k)
      sims(t, k) = static_cast<float>(fixtures::dot64(e.row(t), idx.centroids.row(k)));
  const DenseSimilarity src(sims);
  // Token 2 sits in cluster 0 with tokens 0 and 1; cluster 1 holds only 3.
  const std::vector<std::uint32_t> a{0, 0, 0, 1, 2, 2, 3, 3};
  const auto r = balance_assignment(a, src, 2);
  REQUIRE(r.moves.size() == 1);
  CHECK(r.moves[0].token == 2);
  CHECK(r.moves[0].from == 0);
  CHECK(r.moves[0].to == 1);
  std::vector<int> sizes(4, 0);
  for (auto k : r.assignment) ++sizes[k];
  CHECK(sizes == std::vector<int>{2, 2, 2, 2});
}

TEST_CASE("balance_assignment replay: greedy log is consistent") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + rng.below(12);
    const std::size_t cap = 1 + rng.below(6);
    const std::size_t v = c * cap;
    Matrix sims(v, c);
    // Coarse values so that ties occur.
    for (auto& x : sims.storage()) x = static_cast<float>(rng.below(8)) / 8.0f;
    std::vector<std::uint32_t> a(v);
    const std::size_t hot = rng.below(c);
    for (auto& k : a) k = static_cast<std::uint32_t>(rng.below(3) == 0 ? hot : rng.below(c));
    const DenseSimilarity src(sims);
    const auto r = balance_assignment(a, src, cap);

    std::vector<std::size_t> orig(c, 0);
    for (auto k : a) ++orig[k];
    std::vector<std::size_t> final_size(c, 0);
    for (auto k : r.assignment) ++final_size[k];
    for (auto s : final_size) REQUIRE(s == cap);

    // Conservatism: only members of overfull clusters move, and only once.
    std::set<TokenId> moved;
    for (const auto& m : r.moves) {
      REQUIRE(orig[m.from] > cap);
      REQUIRE(a[m.token] == m.from);
      REQUIRE(moved.insert(m.token).second);
    }
    for (std::size_t t = 0; t < v; ++t) {
      if (!moved.count(static_cast<TokenId>(t))) REQUIRE(r.assignment[t] == a[t]);
    }

    // Eviction picks the lowest (similarity, token id) members.
    for (std::size_t k = 0; k < c; ++k) {
      if (orig[k] <= cap) continue;
      std::vector<std::pair<float, TokenId>> mem;
      for (std::size_t t = 0; t < v; ++t)
        if (a[t] == k) mem.emplace_back(sims(t, k), static_cast<TokenId>(t));
      std::sort(mem.begin(), mem.end());
      std::set<TokenId> expect;
      for (std::size_t i = 0; i < orig[k] - cap; ++i) expect.insert(mem[i].second);
      std::set<TokenId> got;
      for (const auto& m : r.moves)
        if (m.from == k) got.insert(m.token);
      REQUIRE(got == expect);
    }

    // Every more-preferred cluster was full when the token moved.
    std::vector<std::size_t> count(c);
    for (std::size_t k = 0; k < c; ++k) count[k] = std::min(orig[k], cap);
    for (const auto& m : r.moves) {
      REQUIRE(count[m.to] < cap);
      for (std::uint32_t j = 0; j < c; ++j) {
        const bool preferred = sims(m.token, j) > sims(m.token, m.to) ||
                               (sims(m.token, j) == sims(m.token, m.to) && j < m.to);
        if (preferred) REQUIRE(count[j] >= cap);
      }
      ++count[m.to];
    }
  }
}

TEST_CASE("balanced builds are exact covers with unit centroids") {
  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t c = 2 + rng.below(30);
    const std::size_t b = 1 + rng.below(20);
    const std::size_t d = 2 + rng.below(24);
    CAPTURE(c);
    CAPTURE(b);
    CAPTURE(d);
    const auto e = unit_of(fixtures::random_embeddings(c * b, d, 100 + trial));
    ClusterOptions o;
    o.clusters = c;
    o.seed = trial;
    o.init = trial % 2 ? InitMethod::UniformRandom : InitMethod::KMeansPlusPlus;
    const auto idx = spherical_kmeans(e, o);
    check_exact_cover(idx);
    CHECK(idx.balanced);
    CHECK(idx.cluster_size == b);
    for (std::size_t k = 0; k < c; ++k) CHECK(idx.members(k) == b);
    CHECK_NOTHROW(check_index(idx));
    for (std::size_t k = 0; k < c; ++k) {
      const auto row = idx.row(k);
      CHECK(std::is_sorted(row.begin(), row.end()));
    }
    CHECK(idx.meta.objective_trace.size() == idx.meta.iterations);
    CHECK(idx.meta.objective_trace.back() ==
          doctest::Approx(clustering_objective(e, idx)).epsilon(1e-9));
  }
}

TEST_CASE("centroids stay unit-norm after every iteration") {
  const auto e = unit_of(fixtures::random_embeddings(600, 12, 3));
  for (bool balanced : {true, false}) {
    for (int iters = 1; iters <= 5; ++iters) {
      ClusterOptions o;
      o.clusters = 30;
      o.balanced = balanced;
      o.max_iterations = iters;
      o.tolerance = 0.0;
      const auto idx = spherical_kmeans(e, o);
      double worst = 0.0;
      for (std::size_t k = 0; k < idx.clusters(); ++k) {
        const double n = std::sqrt(fixtures::dot64(idx.centroids.row(k), idx.centroids.row(k)));
        worst = std::max(worst, std::abs(n - 1.0));
      }
      CHECK(worst < 1e-5);
      CHECK(idx.meta.iterations <= static_cast<std::uint32_t>(iters));
    }
  }
}

TEST_CASE("unbalanced builds pad rows and still cover every token") {
  const auto e = unit_of(EmbeddingMatrix{
      synthetic_embeddings({.vocab = 2000, .dim = 16, .mean_group = 16, .noise = 0.5, .seed = 4}).m});
  ClusterOptions o;
  o.clusters = 50;
  o.balanced = false;
  const auto idx = spherical_kmeans(e, o);
  check_exact_cover(idx);
  CHECK_NOTHROW(check_index(idx));
  std::size_t lo = idx.cluster_size, hi = 0;
  for (std::size_t k = 0; k < idx.clusters(); ++k) {
    lo = std::min(lo, idx.members(k));
    hi = std::max(hi, idx.members(k));
    CHECK(idx.members(k) >= 1);
  }
  CHECK(hi == idx.cluster_size);
  CHECK(lo < hi);
  CHECK_FALSE(idx.balanced);

  // The plain objective is at least as good as the constrained one.
  ClusterOptions ob = o;
  ob.balanced = true;
  const auto bal = spherical_kmeans(e, ob);
  CHECK(clustering_objective(e, idx) <= clustering_objective(e, bal) * 1.01);
}

TEST_CASE("builds are deterministic across runs and thread counts") {
  const auto e = unit_of(fixtures::random_embeddings(4096, 24, 8));
  ClusterOptions o;
  o.clusters = 128;
  o.seed = 99;
  set_thread_count(1);
  const auto a = spherical_kmeans(e, o);
  const auto b = spherical_kmeans(e, o);
  set_thread_count(4);
  const auto c = spherical_kmeans(e, o);
  set_thread_count(1);
  CHECK(a == b);
  CHECK(a == c);

  o.seed = 100;
  CHECK_FALSE(spherical_kmeans(e, o).c2t == a.c2t);
}

TEST_CASE("early stop honours the tolerance") {
  const auto e = unit_of(fixtures::random_embeddings(1024, 8, 12));
  ClusterOptions o;
  o.clusters = 64;
  o.tolerance = 0.5;
  const auto loose = spherical_kmeans(e, o);
  CHECK(loose.meta.iterations == 2);
  o.tolerance = 0.0;
  o.max_iterations = 3;
  CHECK(spherical_kmeans(e, o).meta.iterations <= 3);
}

TEST_CASE("paper shape v=128256, c=8016 gives b=16 everywhere") {
  // Tiny dimension keeps the build cheap; the shape is what matters.
  const auto e = unit_of(fixtures::random_embeddings(128256, 4, 1));
  ClusterOptions o;
  o.clusters = 8016;
  o.max_iterations = 1;
  o.init = InitMethod::UniformRandom;
  const auto idx = spherical_kmeans(e, o);
  CHECK(idx.cluster_size == 16);
  check_exact_cover(idx);
  for (std::size_t k = 0; k < idx.clusters(); ++k) REQUIRE(idx.members(k) == 16);
}

TEST_CASE("assignment_of inverts the C2T map") {
  const auto e = fixtures::f8();
  const auto idx = fixtures::index_from_groups(e, {{6, 7}, {0, 1}, {2, 3}, {4, 5}});
  CHECK(assignment_of(idx) == std::vector<std::uint32_t>{1, 1, 2, 2, 3, 3, 0, 0});
}
