#include "flashhead/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

namespace flashhead {

namespace {

std::atomic<int> g_threads{0};

int env_threads() {
  if (const char* s = std::getenv("FLASHHEAD_THREADS")) {
    try {
      const int n = std::stoi(s);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return 1;
}

}  // namespace

float dot_f32(const float* a, const float* b, std::size_t n) noexcept {
  using vec = float __attribute__((vector_size(64)));
  constexpr std::size_t w = sizeof(vec) / sizeof(float);
  vec acc[4] = {};
  std::size_t i = 0;
  for (; i + 4 * w <= n; i += 4 * w) {
    for (std::size_t u = 0; u < 4; ++u) {
      vec x, y;
      std::memcpy(&x, a + i + u * w, sizeof(vec));
      std::memcpy(&y, b + i + u * w, sizeof(vec));
      acc[u] += x * y;
    }
  }
  for (; i + w <= n; i += w) {
    vec x, y;
    std::memcpy(&x, a + i, sizeof(vec));
    std::memcpy(&y, b + i, sizeof(vec));
    acc[0] += x * y;
  }
  vec acc0 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  float lanes[w];
  std::memcpy(lanes, &acc0, sizeof(vec));
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l % w] += a[i] * b[i];
  for (std::size_t s = w / 2; s > 0; s /= 2) {
    for (std::size_t l = 0; l < s; ++l) lanes[l] += lanes[l + s];
  }
  return lanes[0];
}

double dot_f64(const float* a, const float* b, std::size_t n) noexcept {
  using fvec = float __attribute__((vector_size(32)));
  using dvec = double __attribute__((vector_size(64)));
  constexpr std::size_t w = sizeof(dvec) / sizeof(double);
  dvec acc0 = {}, acc1 = {};
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    fvec x0, y0, x1, y1;
    std::memcpy(&x0, a + i, sizeof(fvec));
    std::memcpy(&y0, b + i, sizeof(fvec));
    std::memcpy(&x1, a + i + w, sizeof(fvec));
    std::memcpy(&y1, b + i + w, sizeof(fvec));
    acc0 += __builtin_convertvector(x0, dvec) * __builtin_convertvector(y0, dvec);
    acc1 += __builtin_convertvector(x1, dvec) * __builtin_convertvector(y1, dvec);
  }
  acc0 += acc1;
  double lanes[w];
  std::memcpy(lanes, &acc0, sizeof(dvec));
  for (std::size_t l = 0; i < n; ++i, ++l) {
    lanes[l % w] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  for (std::size_t s = w / 2; s > 0; s /= 2) {
    for (std::size_t l = 0; l < s; ++l) lanes[l] += lanes[l + s];
  }
  return lanes[0];
}

int thread_count() {
  const int n = g_threads.load();
  return n > 0 ? n : env_threads();
}

void set_thread_count(int n) { g_threads.store(std::max(n, 0)); }

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  grain = std::max<std::size_t>(grain, 1);
  const std::size_t chunks = (n + grain - 1) / grain;
  const auto workers = static_cast<std::size_t>(
      std::min<std::size_t>(static_cast<std::size_t>(thread_count()), chunks));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      fn(c * grain, std::min(n, (c + 1) * grain));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= chunks || failed.load()) return;
        try {
          fn(c * grain, std::min(n, (c + 1) * grain));
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace flashhead
