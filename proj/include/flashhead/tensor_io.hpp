#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "flashhead/clustering.hpp"
#include "flashhead/matrix.hpp"
#include "flashhead/quant.hpp"

namespace flashhead {

// Container layout (all integers little-endian):
//   magic   8 bytes  "FLSHHD01"
//   dtype   u32      0 = real32, 1 = int-packed
//   rank    u32
//   dims    rank x u64
//   payload row-major
inline constexpr char kMagic[8] = {'F', 'L', 'S', 'H', 'H', 'D', '0', '1'};

enum class Dtype : std::uint32_t { Real32 = 0, IntPacked = 1 };

struct TensorFileHeader {
  Dtype dtype = Dtype::Real32;
  std::vector<std::uint64_t> dims;

  std::uint64_t element_count() const;  // throws DimMismatch on overflow
  std::uint64_t encoded_size() const { return 16 + 8 * dims.size(); }
};

/// Loads a real32 tensor of the given rank. Rank-1 tensors load as n x 1.
Matrix load_matrix(const std::filesystem::path& path, std::uint32_t expected_rank = 2);
void save_matrix(const Matrix& m, const std::filesystem::path& path);

/// Decodes an in-memory file image; shared by the loaders and the fuzz tests.
Matrix decode_matrix(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_rank);
std::vector<std::uint8_t> encode_matrix(const Matrix& m);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
HiddenBatch load_hidden(const std::filesystem::path& path, std::size_t expected_dim = 0);

// Index file: header (dtype 0, rank 4, dims [c, d, b, v]), centroids real32
// c x d, C2T u32 c x b, then seed u64, iterations u32, trace length u32 and
// the trace as real64. An optional dtype-1 section follows with dims
// [c, d, bits, group_size], the packed codes, then real32 group scales.
void save_index(const ClusteredIndex& index, const std::filesystem::path& path,
                const QuantizedCentroids* stage1 = nullptr);

struct LoadedIndex {
  ClusteredIndex index;
  std::optional<QuantizedCentroids> stage1;
};

LoadedIndex load_index(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_index(const ClusteredIndex& index,
                                       const QuantizedCentroids* stage1 = nullptr);
LoadedIndex decode_index(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace flashhead
