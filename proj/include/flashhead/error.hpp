#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace flashhead {

enum class ErrorCode {
  BadMagic,
  BadDtype,
  DimMismatch,
  TruncatedPayload,
  TrailingData,
  NonFiniteValue,
  IoFailure,
  ZeroNormRow,
  InvalidOptions,
  InvalidConfig,
  InvalidGroup,
  TooManySubsets,
  AllZero,
  ZeroProbability,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-checkable code. `index` holds the offending
/// row (NonFiniteValue, ZeroNormRow) or token (ZeroProbability) when known.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg,
        std::optional<std::uint64_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg),
        code_(code),
        index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::uint64_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::uint64_t> index_;
};

#define FLASHHEAD_CHECK(cond, code, msg)            \
  do {                                              \
    if (!(cond)) {                                  \
      throw ::flashhead::Error((code), (msg));      \
    }                                               \
  } while (false)

}  // namespace flashhead
