#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace flashhead {

/// Dense row-major matrix of 32-bit reals.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> row(std::size_t i) noexcept {
    return {data_.data() + i * cols_, cols_};
  }
  std::span<const float> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  float& operator()(std::size_t i, std::size_t j) noexcept {
    return data_[i * cols_ + j];
  }
  float operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * cols_ + j];
  }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Output-embedding matrix E: one row per token (v x d).
struct EmbeddingMatrix {
  Matrix m;

  std::size_t vocab() const noexcept { return m.rows(); }
  std::size_t dim() const noexcept { return m.cols(); }
  std::span<const float> row(std::size_t token) const noexcept {
    return m.row(token);
  }

  friend bool operator==(const EmbeddingMatrix&,
                         const EmbeddingMatrix&) = default;
};

/// A batch of hidden states h, one per row (n x d).
struct HiddenBatch {
  Matrix m;

  std::size_t count() const noexcept { return m.rows(); }
  std::size_t dim() const noexcept { return m.cols(); }
  std::span<const float> row(std::size_t i) const noexcept {
    return m.row(i);
  }

  friend bool operator==(const HiddenBatch&, const HiddenBatch&) = default;
};

using TokenId = std::uint32_t;

}  // namespace flashhead
