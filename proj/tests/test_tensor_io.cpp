#include <doctest.h>

#include <cstring>
#include <fstream>
#include <limits>

#include "fixtures.hpp"
#include "flashhead/error.hpp"
#include "flashhead/quant.hpp"
#include "flashhead/tensor_io.hpp"

using namespace flashhead;

namespace {

// Builds a file image byte by byte, independent of the library writer.
std::vector<std::uint8_t> raw_file(std::uint32_t dtype,
                                   const std::vector<std::uint64_t>& dims,
                                   std::size_t payload_bytes,
                                   const char* magic = "FLSHHD01") {
  std::vector<std::uint8_t> out(magic, magic + 8);
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(dtype, 4);
  put(dims.size(), 4);
  for (auto d : dims) put(d, 8);
  out.resize(out.size() + payload_bytes, 0);
  return out;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::IoFailure;
}

}  // namespace

TEST_CASE("identity-like 2x3 payload loads row by row") {
  auto bytes = raw_file(0, {2, 3}, 24);
  const float vals[6] = {1, 0, 0, 0, 1, 0};
  std::memcpy(bytes.data() + bytes.size() - 24, vals, 24);
  const auto path = fixtures::temp_path("m23.bin");
  write_file(path, bytes);

  const auto m = load_matrix(path);
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 3);
  CHECK(std::vector<float>(m.values().begin(), m.values().end()) ==
        std::vector<float>(vals, vals + 6));
  CHECK(encode_matrix(m) == bytes);
}

TEST_CASE("header is little-endian with u32 dtype and rank") {
  const auto bytes = encode_matrix(Matrix(3, 5));
  REQUIRE(bytes.size() == 8 + 4 + 4 + 16 + 60);
  CHECK(std::memcmp(bytes.data(), "FLSHHD01", 8) == 0);
  CHECK(bytes[8] == 0);
  CHECK(bytes[12] == 2);
  CHECK(bytes[16] == 3);
  CHECK(bytes[24] == 5);
}

TEST_CASE("malformed files are rejected with the right code") {
  const auto good = encode_matrix(fixtures::gaussian(4, 3, 1));
  CHECK_NOTHROW(decode_matrix(good, 2));

  auto truncated = good;
  truncated.resize(truncated.size() - 4);
  CHECK(code_of([&] { decode_matrix(truncated, 2); }) == ErrorCode::TruncatedPayload);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(code_of([&] { decode_matrix(trailing, 2); }) == ErrorCode::TrailingData);

  auto magic = good;
  magic[7] = '2';
  CHECK(code_of([&] { decode_matrix(magic, 2); }) == ErrorCode::BadMagic);

  CHECK(code_of([&] { decode_matrix(good, 3); }) == ErrorCode::DimMismatch);
  CHECK(code_of([&] { decode_matrix(raw_file(7, {1, 1}, 4), 2); }) == ErrorCode::BadDtype);
  CHECK(code_of([&] { decode_matrix(raw_file(0, {0, 4}, 0), 2); }) == ErrorCode::DimMismatch);

  std::vector<std::uint8_t> tiny(good.begin(), good.begin() + 12);
  CHECK(code_of([&] { decode_matrix(tiny, 2); }) == ErrorCode::TruncatedPayload);

  const auto huge = raw_file(0, {std::uint64_t{1} << 40, std::uint64_t{1} << 40}, 0);
  CHECK(code_of([&] { decode_matrix(huge, 2); }) == ErrorCode::DimMismatch);
}

TEST_CASE("non-finite values report the offending row") {
  auto m = fixtures::gaussian(5, 4, 2);
  m(3, 1) = std::numeric_limits<float>::quiet_NaN();
  try {
    decode_matrix(encode_matrix(m), 2);
    FAIL("expected NonFiniteValue");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteValue);
    CHECK(e.index() == 3);
  }
  m(3, 1) = 0.0f;
  m(4, 0) = -std::numeric_limits<float>::infinity();
  try {
    decode_matrix(encode_matrix(m), 2);
    FAIL("expected NonFiniteValue");
  } catch (const Error& e) {
    CHECK(e.index() == 4);
  }
}

TEST_CASE("round trip is bit-exact for arbitrary finite values") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(20);
    const std::size_t c = 1 + rng.below(20);
    Matrix m(r, c);
    for (auto& x : m.storage()) {
      std::uint32_t bits;
      do {
        bits = static_cast<std::uint32_t>(rng.next_u64());
        std::memcpy(&x, &bits, 4);
      } while (!std::isfinite(x));
    }
    const auto path = fixtures::temp_path("rt.bin");
    save_matrix(m, path);
    const auto back = load_matrix(path);
    CHECK(std::memcmp(back.data(), m.data(), m.size() * 4) == 0);
    CHECK(back.rows() == r);
    CHECK(back.cols() == c);
  }
}

TEST_CASE("fuzzed headers load only when payload size matches") {
  Rng rng(4);
  int accepted = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::uint32_t rank = static_cast<std::uint32_t>(1 + rng.below(3));
    std::vector<std::uint64_t> dims(rank);
    std::uint64_t count = 1;
    for (auto& d : dims) {
      d = 1 + rng.below(6);
      count *= d;
    }
    std::size_t payload = count * 4;
    const auto kind = rng.below(4);
    if (kind == 1) payload -= 1 + rng.below(payload);
    if (kind == 2) payload += 1 + rng.below(9);
    auto bytes = raw_file(0, dims, payload);
    const bool matches = payload == count * 4;
    bool ok = true;
    try {
      const auto m = decode_matrix(bytes, rank);
      CHECK(m.size() == count);
    } catch (const Error& e) {
      ok = false;
      CHECK((e.code() == ErrorCode::TruncatedPayload || e.code() == ErrorCode::TrailingData));
    }
    CHECK(ok == matches);
    accepted += ok;
  }
  CHECK(accepted > 0);
}

TEST_CASE("hidden batch dimension must match the embeddings") {
  const auto path = fixtures::temp_path("h.bin");
  save_matrix(fixtures::gaussian(3, 4, 5), path);
  CHECK(load_hidden(path, 4).count() == 3);
  CHECK(code_of([&] { load_hidden(path, 5); }) == ErrorCode::DimMismatch);
}

TEST_CASE("paper-size zero matrix loads without index overflow") {
  const std::size_t v = 128256, d = 2048;
  const auto path = fixtures::temp_path("big.bin");
  {
    const auto header = raw_file(0, {v, d}, 0);
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
    std::vector<char> zeros(1 << 20, 0);
    std::size_t left = v * d * 4;
    while (left > 0) {
      const auto n = std::min(left, zeros.size());
      f.write(zeros.data(), static_cast<std::streamsize>(n));
      left -= n;
    }
  }
  {
    const auto e = load_embeddings(path);
    CHECK(e.vocab() == v);
    CHECK(e.dim() == d);
    CHECK(e.row(v - 1)[d - 1] == 0.0f);
  }
  std::filesystem::remove(path);
}

TEST_CASE("index round trip preserves centroids, C2T and metadata") {
  const auto e = fixtures::f8();
  auto idx = fixtures::index_from_groups(e, {{0, 1}, {2, 3}, {4, 5}, {6, 7}});
  idx.meta = {7, 12, {1.5, 0.75, 0.6089}};
  check_index(idx);
  const auto path = fixtures::temp_path("f8.idx");
  save_index(idx, path);
  const auto back = load_index(path);
  CHECK(back.index == idx);
  CHECK_FALSE(back.stage1.has_value());

  const auto q = quantize_centroids(idx.centroids, 4, 2);
  save_index(idx, path, &q);
  const auto with_q = load_index(path);
  CHECK(with_q.index == idx);
  REQUIRE(with_q.stage1.has_value());
  CHECK(*with_q.stage1 == q);
}

TEST_CASE("unbalanced index keeps pad entries and the balanced flag") {
  const auto e = fixtures::random_embeddings(7, 3, 9);
  const auto idx = fixtures::index_from_groups(e, {{0, 1, 2}, {3}, {4, 5, 6}});
  REQUIRE_FALSE(idx.balanced);
  check_index(idx);
  const auto back = decode_index(encode_index(idx));
  CHECK(back.index == idx);
  CHECK(back.index.row(1)[1] == kPadToken);
}

TEST_CASE("c=8016, b=16 index stores a c x b u32 block") {
  const std::size_t c = 8016, b = 16, d = 4, v = c * b;
  ClusteredIndex idx;
  idx.centroids = Matrix(c, d);
  for (std::size_t k = 0; k < c; ++k) idx.centroids(k, k % d) = 1.0f;
  idx.cluster_size = b;
  idx.vocab = v;
  idx.c2t.resize(v);
  for (std::size_t t = 0; t < v; ++t) idx.c2t[t] = static_cast<TokenId>(v - 1 - t);
  const auto bytes = encode_index(idx);
  const std::size_t header = 8 + 4 + 4 + 4 * 8;
  const std::size_t c2t_at = header + c * d * 4;
  CHECK(bytes.size() == c2t_at + c * b * 4 + 8 + 4 + 4);
  std::uint32_t first = 0, last = 0;
  std::memcpy(&first, bytes.data() + c2t_at, 4);
  std::memcpy(&last, bytes.data() + c2t_at + (c * b - 1) * 4, 4);
  CHECK(first == v - 1);
  CHECK(last == 0);
  CHECK(decode_index(bytes).index == idx);
}

TEST_CASE("unwritable path raises IoFailure") {
  const auto e = fixtures::f8();
  const auto idx = fixtures::index_from_groups(e, fixtures::contiguous_groups(8, 2));
  CHECK(code_of([&] { save_index(idx, "/nonexistent-dir/x/y.idx"); }) == ErrorCode::IoFailure);
  CHECK(code_of([&] { load_index("/nonexistent-dir/none.idx"); }) == ErrorCode::IoFailure);
}

TEST_CASE("corrupted index files are rejected") {
  const auto e = fixtures::f8();
  const auto idx = fixtures::index_from_groups(e, fixtures::contiguous_groups(8, 2));
  const auto bytes = encode_index(idx);
  auto cut = bytes;
  cut.pop_back();
  CHECK(code_of([&] { decode_index(cut); }) == ErrorCode::TruncatedPayload);
  auto extra = bytes;
  extra.push_back(1);
  CHECK_THROWS_AS(decode_index(extra), Error);
  auto bad_token = bytes;
  const std::size_t c2t_at = 8 + 4 + 4 + 32 + 4 * 2 * 4;
  bad_token[c2t_at] = 99;
  CHECK_THROWS_AS(decode_index(bad_token), Error);
}
