#include "ssdiff/error.hpp"

namespace ssdiff {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid input";
    case ErrorCode::DomainBoundary: return "domain boundary";
    case ErrorCode::SamplerFailure: return "sampler failure";
    case ErrorCode::NumericalOverflow: return "numerical overflow";
    case ErrorCode::FormulaViolation: return "formula violation";
    case ErrorCode::Shape: return "shape mismatch";
    case ErrorCode::Step: return "step error";
    case ErrorCode::GraphIntegrity: return "graph integrity";
    case ErrorCode::EstimatorFailure: return "estimator failure";
    case ErrorCode::Coverage: return "coverage";
    case ErrorCode::UnsupportedFamily: return "unsupported family";
    case ErrorCode::SizeCap: return "size cap";
    case ErrorCode::DegenerateDirection: return "degenerate direction";
    case ErrorCode::HashMismatch: return "hash mismatch";
    case ErrorCode::InvalidPlan: return "invalid plan";
    case ErrorCode::Config: return "config";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

}  // namespace ssdiff
