#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace squeeze10 {

enum class ErrorCode {
  MagicMismatch,
  VersionUnsupported,
  ShapeMismatch,
  NonFiniteValue,
  IoFailure,
  EmptyInput,
  BadBits,
  CodeOutOfRange,
  CountMismatch,
  DimensionMismatch,
  CorruptMask,
  NonPositiveDiagonal,
  NotPositiveDefinite,
  ZeroSamples,
  ZeroPivot,
  MissingPrefix,
  EmptySample,
  UnknownFormat,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code);

// All library failures are reported through this type; what() is prefixed
// with the code name, e.g. "ShapeMismatch: tensor 'w0' ...".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace squeeze10
