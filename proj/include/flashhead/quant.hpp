#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flashhead/matrix.hpp"

namespace flashhead {

/// Symmetric per-group round-to-nearest quantization of a row-major matrix.
/// int4 codes are packed two per byte, low nibble first.
struct QuantizedCentroids {
  int bits = 4;
  std::size_t group_size = 64;
  std::size_t rows = 0;  // c
  std::size_t cols = 0;  // d
  std::vector<std::uint8_t> packed;
  std::vector<float> scales;  // one per group, row-major group order

  std::size_t groups_per_row() const noexcept { return cols / group_size; }
  int code(std::size_t flat_index) const noexcept;

  friend bool operator==(const QuantizedCentroids&,
                         const QuantizedCentroids&) = default;
};

/// scale = max|w| / (2^(bits-1) - 1) per group (1.0 for an all-zero group);
/// code = round(w / scale) clamped to the symmetric range.
QuantizedCentroids quantize_centroids(const Matrix& weights, int bits,
                                      std::size_t group_size = 64);

Matrix dequantize(const QuantizedCentroids& q);

/// Row logits computed as sum_g scale_g * dot(codes_g, h_g) without
/// materializing a dequantized matrix.
std::vector<float> centroid_logits_quant(const QuantizedCentroids& q,
                                         std::span<const float> h);
float quantized_row_logit(const QuantizedCentroids& q, std::size_t row,
                          std::span<const float> h);

/// Worst-case |quantized - exact| logit error for `row`:
/// sum_g (scale_g / 2) * ||h_g||_1.
double logit_error_bound(const QuantizedCentroids& q, std::size_t row,
                         std::span<const float> h);

}  // namespace flashhead
