#include "flashhead/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include "flashhead/error.hpp"

namespace flashhead {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor_io assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out_.insert(out_.end(), p, p + sizeof(T));
  }

  template <typename T>
  void put_array(const T* data, std::size_t n) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n * sizeof(T));
  }

  void put_header(const TensorFileHeader& h) {
    put_array(kMagic, sizeof(kMagic));
    put(static_cast<std::uint32_t>(h.dtype));
    put(static_cast<std::uint32_t>(h.dims.size()));
    for (auto dim : h.dims) put(dim);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint64_t remaining() const { return in_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw Error(ErrorCode::TruncatedPayload,
                  std::string("file ends inside ") + what);
    }
  }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
  void get_array(T* out, std::uint64_t n, const char* what) {
    // n * sizeof(T) is bounded by a prior element_count() check.
    need(n * sizeof(T), what);
    std::memcpy(out, in_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }

  TensorFileHeader get_header() {
    need(sizeof(kMagic), "magic");
    if (std::memcmp(in_.data() + pos_, kMagic, sizeof(kMagic)) != 0) {
      throw Error(ErrorCode::BadMagic, "expected FLSHHD01");
    }
    pos_ += sizeof(kMagic);
    TensorFileHeader h;
    const auto dtype = get<std::uint32_t>("header");
    if (dtype > 1) {
      throw Error(ErrorCode::BadDtype, "unknown dtype " + std::to_string(dtype));
    }
    h.dtype = static_cast<Dtype>(dtype);
    const auto rank = get<std::uint32_t>("header");
    if (rank > 16) {
      throw Error(ErrorCode::DimMismatch, "implausible rank " + std::to_string(rank));
    }
    h.dims.resize(rank);
    for (auto& dim : h.dims) dim = get<std::uint64_t>("header");
    return h;
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::uint64_t pos_ = 0;
};

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw Error(ErrorCode::DimMismatch, "dimension product overflows");
  }
  return a * b;
}

void check_finite(const Matrix& m) {
  const float* p = m.data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(p[i])) {
      const std::uint64_t row = m.cols() ? i / m.cols() : 0;
      throw Error(ErrorCode::NonFiniteValue,
                  "non-finite value in row " + std::to_string(row), row);
    }
  }
}

}  // namespace

std::uint64_t TensorFileHeader::element_count() const {
  std::uint64_t n = 1;
  for (auto dim : dims) n = checked_mul(n, dim);
  return n;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::uint8_t> bytes(size);
  in.seekg(0);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()),
                       static_cast<std::streamsize>(size))) {
    throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  }
  return bytes;
}

void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

std::vector<std::uint8_t> encode_matrix(const Matrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(32 + m.size() * sizeof(float));
  Writer w(out);
  w.put_header({Dtype::Real32, {m.rows(), m.cols()}});
  w.put_array(m.data(), m.size());
  return out;
}

Matrix decode_matrix(const std::vector<std::uint8_t>& bytes,
                     std::uint32_t expected_rank) {
  Reader r(bytes);
  const auto h = r.get_header();
  if (h.dtype != Dtype::Real32) {
    throw Error(ErrorCode::BadDtype, "expected a real32 tensor");
  }
  if (h.dims.size() != expected_rank) {
    throw Error(ErrorCode::DimMismatch,
                "rank " + std::to_string(h.dims.size()) + ", expected " +
                    std::to_string(expected_rank));
  }
  const std::uint64_t count = h.element_count();
  const std::uint64_t payload = checked_mul(count, sizeof(float));
  if (payload > r.remaining()) {
    throw Error(ErrorCode::TruncatedPayload,
                "payload needs " + std::to_string(payload) + " bytes, file has " +
                    std::to_string(r.remaining()));
  }
  if (payload < r.remaining()) {
    throw Error(ErrorCode::TrailingData,
                std::to_string(r.remaining() - payload) +
                    " bytes after the declared payload");
  }
  std::size_t rows = 1, cols = 1;
  if (expected_rank >= 1) rows = h.dims[0];
  for (std::size_t i = 1; i < h.dims.size(); ++i) cols *= h.dims[i];
  if (rows == 0 || cols == 0) {
    throw Error(ErrorCode::DimMismatch, "zero-sized dimension");
  }
  std::vector<float> data(count);
  r.get_array(data.data(), count, "payload");
  Matrix m(rows, cols, std::move(data));
  check_finite(m);
  return m;
}

Matrix load_matrix(const std::filesystem::path& path,
                   std::uint32_t expected_rank) {
  return decode_matrix(read_file(path), expected_rank);
}

void save_matrix(const Matrix& m, const std::filesystem::path& path) {
  write_file(path, encode_matrix(m));
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return {load_matrix(path, 2)};
}

HiddenBatch load_hidden(const std::filesystem::path& path,
                        std::size_t expected_dim) {
  HiddenBatch b{load_matrix(path, 2)};
  if (expected_dim != 0 && b.dim() != expected_dim) {
    throw Error(ErrorCode::DimMismatch,
                "hidden dim " + std::to_string(b.dim()) +
                    " does not match embedding dim " +
                    std::to_string(expected_dim));
  }
  return b;
}

std::vector<std::uint8_t> encode_index(const ClusteredIndex& index,
                                       const QuantizedCentroids* stage1) {
  const std::size_t c = index.clusters();
  const std::size_t d = index.dim();
  const std::size_t b = index.cluster_size;
  std::vector<std::uint8_t> out;
  out.reserve(48 + c * d * 4 + c * b * 4 + 16 +
              index.meta.objective_trace.size() * 8);
  Writer w(out);
  w.put_header({Dtype::Real32, {c, d, b, index.vocab}});
  w.put_array(index.centroids.data(), c * d);
  w.put_array(index.c2t.data(), c * b);
  w.put(index.meta.seed);
  w.put(index.meta.iterations);
  w.put(static_cast<std::uint32_t>(index.meta.objective_trace.size()));
  w.put_array(index.meta.objective_trace.data(),
              index.meta.objective_trace.size());
  if (stage1 != nullptr) {
    w.put_header({Dtype::IntPacked,
                  {stage1->rows, stage1->cols,
                   static_cast<std::uint64_t>(stage1->bits),
                   stage1->group_size}});
    w.put_array(stage1->packed.data(), stage1->packed.size());
    w.put_array(stage1->scales.data(), stage1->scales.size());
  }
  return out;
}

LoadedIndex decode_index(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const auto h = r.get_header();
  if (h.dtype != Dtype::Real32) {
    throw Error(ErrorCode::BadDtype, "index header must be real32");
  }
  if (h.dims.size() != 4) {
    throw Error(ErrorCode::DimMismatch, "index header must have rank 4");
  }
  const std::uint64_t c = h.dims[0], d = h.dims[1], b = h.dims[2],
                      v = h.dims[3];
  if (c == 0 || d == 0 || b == 0 || v == 0) {
    throw Error(ErrorCode::DimMismatch, "zero-sized index dimension");
  }
  const std::uint64_t centroid_bytes = checked_mul(checked_mul(c, d), 4);
  const std::uint64_t map_bytes = checked_mul(checked_mul(c, b), 4);
  r.need(centroid_bytes, "centroids");
  r.need(centroid_bytes + map_bytes, "C2T");

  LoadedIndex out;
  ClusteredIndex& idx = out.index;
  std::vector<float> centroids(c * d);
  r.get_array(centroids.data(), c * d, "centroids");
  idx.centroids = Matrix(c, d, std::move(centroids));
  check_finite(idx.centroids);
  idx.c2t.resize(c * b);
  r.get_array(idx.c2t.data(), c * b, "C2T");
  idx.cluster_size = b;
  idx.vocab = v;
  idx.balanced = c * b == v;
  for (auto t : idx.c2t) {
    if (t == kPadToken) {
      idx.balanced = false;
    } else if (t >= v) {
      throw Error(ErrorCode::DimMismatch, "C2T entry out of range");
    }
  }
  idx.meta.seed = r.get<std::uint64_t>("metadata");
  idx.meta.iterations = r.get<std::uint32_t>("metadata");
  const auto trace_len = r.get<std::uint32_t>("metadata");
  idx.meta.objective_trace.resize(trace_len);
  r.get_array(idx.meta.objective_trace.data(), trace_len, "objective trace");

  if (r.remaining() > 0) {
    const auto qh = r.get_header();
    if (qh.dtype != Dtype::IntPacked || qh.dims.size() != 4) {
      throw Error(ErrorCode::BadDtype, "expected an int-packed stage-1 section");
    }
    QuantizedCentroids q;
    q.rows = qh.dims[0];
    q.cols = qh.dims[1];
    q.bits = static_cast<int>(qh.dims[2]);
    q.group_size = qh.dims[3];
    if (q.rows != c || q.cols != d || (q.bits != 4 && q.bits != 8) ||
        q.group_size == 0 || q.cols % q.group_size != 0) {
      throw Error(ErrorCode::DimMismatch, "stage-1 section does not match index");
    }
    const std::uint64_t elems = checked_mul(c, d);
    const std::uint64_t packed = (checked_mul(elems, q.bits) + 7) / 8;
    const std::uint64_t groups = elems / q.group_size;
    const std::uint64_t need = packed + groups * 4;
    if (need > r.remaining()) {
      throw Error(ErrorCode::TruncatedPayload, "stage-1 section truncated");
    }
    if (need < r.remaining()) {
      throw Error(ErrorCode::TrailingData, "bytes after stage-1 section");
    }
    q.packed.resize(packed);
    r.get_array(q.packed.data(), packed, "packed codes");
    q.scales.resize(groups);
    r.get_array(q.scales.data(), groups, "group scales");
    out.stage1 = std::move(q);
  }
  return out;
}

void save_index(const ClusteredIndex& index, const std::filesystem::path& path,
                const QuantizedCentroids* stage1) {
  write_file(path, encode_index(index, stage1));
}

LoadedIndex load_index(const std::filesystem::path& path) {
  return decode_index(read_file(path));
}

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadDtype: return "BadDtype";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::TrailingData: return "TrailingData";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ZeroNormRow: return "ZeroNormRow";
    case ErrorCode::InvalidOptions: return "InvalidOptions";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidGroup: return "InvalidGroup";
    case ErrorCode::TooManySubsets: return "TooManySubsets";
    case ErrorCode::AllZero: return "AllZero";
    case ErrorCode::ZeroProbability: return "ZeroProbability";
  }
  return "Unknown";
}

}  // namespace flashhead
