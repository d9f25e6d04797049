#include "flashhead/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flashhead/error.hpp"
#include "flashhead/kernels.hpp"

namespace flashhead {

namespace {

int max_code(int bits) { return (1 << (bits - 1)) - 1; }

void set_code(QuantizedCentroids& q, std::size_t i, int code) {
  if (q.bits == 8) {
    q.packed[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(code));
    return;
  }
  const auto nibble = static_cast<std::uint8_t>(code & 0xF);
  std::uint8_t& byte = q.packed[i / 2];
  if (i % 2 == 0) {
    byte = static_cast<std::uint8_t>((byte & 0xF0) | nibble);
  } else {
    byte = static_cast<std::uint8_t>((byte & 0x0F) | (nibble << 4));
  }
}

// Sign-extends the codes of one group into `out`.
void unpack_group(const QuantizedCentroids& q, std::size_t first,
                  std::size_t n, float* out) {
  if (q.bits == 8) {
    const auto* src = reinterpret_cast<const std::int8_t*>(q.packed.data()) + first;
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(src[j]);
    return;
  }
  // Group starts are even whenever group_size is even.
  if (first % 2 == 0 && n % 2 == 0) {
    const std::uint8_t* src = q.packed.data() + first / 2;
    for (std::size_t j = 0; j < n / 2; ++j) {
      const std::uint8_t byte = src[j];
      out[2 * j] = static_cast<float>(static_cast<std::int8_t>(byte << 4) >> 4);
      out[2 * j + 1] = static_cast<float>(static_cast<std::int8_t>(byte) >> 4);
    }
    return;
  }
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(q.code(first + j));
}

}  // namespace

int QuantizedCentroids::code(std::size_t flat_index) const noexcept {
  if (bits == 8) return static_cast<std::int8_t>(packed[flat_index]);
  const std::uint8_t byte = packed[flat_index / 2];
  const auto nibble = static_cast<std::uint8_t>(
      flat_index % 2 == 0 ? (byte & 0x0F) : (byte >> 4));
  return static_cast<std::int8_t>(nibble << 4) >> 4;
}

QuantizedCentroids quantize_centroids(const Matrix& weights, int bits,
                                      std::size_t group_size) {
  if (bits != 4 && bits != 8) {
    throw Error(ErrorCode::InvalidGroup, "bits must be 4 or 8");
  }
  if (group_size == 0 || weights.cols() == 0 || weights.cols() % group_size != 0) {
    throw Error(ErrorCode::InvalidGroup,
                "group size " + std::to_string(group_size) +
                    " does not divide row length " + std::to_string(weights.cols()));
  }
  QuantizedCentroids q;
  q.bits = bits;
  q.group_size = group_size;
  q.rows = weights.rows();
  q.cols = weights.cols();
  const std::size_t n = q.rows * q.cols;
  q.packed.assign((n * static_cast<std::size_t>(bits) + 7) / 8, 0);
  q.scales.resize(n / group_size);
  const int qmax = max_code(bits);
  const float* w = weights.data();
  for (std::size_t g = 0; g < q.scales.size(); ++g) {
    const float* grp = w + g * group_size;
    float amax = 0.0f;
    for (std::size_t j = 0; j < group_size; ++j) amax = std::max(amax, std::abs(grp[j]));
    const float scale = amax > 0.0f ? amax / static_cast<float>(qmax) : 1.0f;
    q.scales[g] = scale;
    for (std::size_t j = 0; j < group_size; ++j) {
      // w * qmax / amax in double keeps exact half steps (0.5 at qmax 7) exact.
      const double ratio = amax > 0.0f ? static_cast<double>(grp[j]) * qmax / amax : 0.0;
      const int code = std::clamp(static_cast<int>(std::lround(ratio)), -qmax, qmax);
      set_code(q, g * group_size + j, code);
    }
  }
  return q;
}

Matrix dequantize(const QuantizedCentroids& q) {
  Matrix out(q.rows, q.cols);
  float* dst = out.data();
  for (std::size_t i = 0; i < q.rows * q.cols; ++i) {
    dst[i] = static_cast<float>(q.code(i)) * q.scales[i / q.group_size];
  }
  return out;
}

float quantized_row_logit(const QuantizedCentroids& q, std::size_t row,
                          std::span<const float> h) {
  const std::size_t gs = q.group_size;
  thread_local std::vector<float> codes;
  codes.resize(gs);
  float total = 0.0f;
  const std::size_t groups = q.groups_per_row();
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t first = row * q.cols + g * gs;
    unpack_group(q, first, gs, codes.data());
    total += q.scales[row * groups + g] * dot_f32(codes.data(), h.data() + g * gs, gs);
  }
  return total;
}

std::vector<float> centroid_logits_quant(const QuantizedCentroids& q,
                                         std::span<const float> h) {
  if (h.size() != q.cols) {
    throw Error(ErrorCode::DimMismatch, "hidden dim does not match quantized rows");
  }
  std::vector<float> out(q.rows);
  for (std::size_t k = 0; k < q.rows; ++k) out[k] = quantized_row_logit(q, k, h);
  return out;
}

double logit_error_bound(const QuantizedCentroids& q, std::size_t row,
                         std::span<const float> h) {
  const std::size_t gs = q.group_size;
  const std::size_t groups = q.groups_per_row();
  double bound = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    double l1 = 0.0;
    for (std::size_t j = 0; j < gs; ++j) l1 += std::abs(static_cast<double>(h[g * gs + j]));
    bound += 0.5 * static_cast<double>(q.scales[row * groups + g]) * l1;
  }
  return bound;
}

}  // namespace flashhead
