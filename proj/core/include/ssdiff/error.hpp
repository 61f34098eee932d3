#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ssdiff {

enum class ErrorCode {
  InvalidInput,
  DomainBoundary,
  SamplerFailure,
  NumericalOverflow,
  FormulaViolation,
  Shape,
  Step,
  GraphIntegrity,
  EstimatorFailure,
  Coverage,
  UnsupportedFamily,
  SizeCap,
  DegenerateDirection,
  HashMismatch,
  InvalidPlan,
  Config,
  Io,
};

[[nodiscard]] std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by rejection samplers; carries the concentration that exhausted the cap.
class SamplerError : public Error {
 public:
  SamplerError(double kappa, const std::string& message)
      : Error(ErrorCode::SamplerFailure, message), kappa_(kappa) {}

  [[nodiscard]] double kappa() const noexcept { return kappa_; }

 private:
  double kappa_;
};

}  // namespace ssdiff
