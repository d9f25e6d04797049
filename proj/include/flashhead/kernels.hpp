#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

namespace flashhead {

// Inner products. The lane layout and final reduction order are fixed, so
// the result depends only on the inputs; every logit in the library (dense
// oracle, stage 1, stage 2) goes through these two functions.
float dot_f32(const float* a, const float* b, std::size_t n) noexcept;
double dot_f64(const float* a, const float* b, std::size_t n) noexcept;

inline float dot_f32(std::span<const float> a,
                     std::span<const float> b) noexcept {
  return dot_f32(a.data(), b.data(), a.size());
}
inline double dot_f64(std::span<const float> a,
                      std::span<const float> b) noexcept {
  return dot_f64(a.data(), b.data(), a.size());
}

/// Worker count used by the data-parallel loops. Defaults to the
/// FLASHHEAD_THREADS environment variable, else 1.
int thread_count();
void set_thread_count(int n);

/// Runs fn(begin, end) over [0, n) split into contiguous chunks of `grain`
/// items. The chunking does not depend on the thread count.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace flashhead
