#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cocycle_clt {

enum class ErrorKind {
  EmptyGraph,
  AsymmetricEdgeSet,
  InvalidGraph,
  NoConvergence,
  UnknownVertex,
  NumericalBreakdown,
  NotInGeneralPosition,
  ExplosionGuard,
  TailTooHeavy,
  InsufficientData,
  InsufficientSamples,
  TooManyRejections,
  DegenerateCovariance,
  CenteringTooNoisy,
  ParseError,
  ValidationError,
  MissingArtifact,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyGraph: return "EmptyGraph";
    case ErrorKind::AsymmetricEdgeSet: return "AsymmetricEdgeSet";
    case ErrorKind::InvalidGraph: return "InvalidGraph";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::UnknownVertex: return "UnknownVertex";
    case ErrorKind::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorKind::NotInGeneralPosition: return "NotInGeneralPosition";
    case ErrorKind::ExplosionGuard: return "ExplosionGuard";
    case ErrorKind::TailTooHeavy: return "TailTooHeavy";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::TooManyRejections: return "TooManyRejections";
    case ErrorKind::DegenerateCovariance: return "DegenerateCovariance";
    case ErrorKind::CenteringTooNoisy: return "CenteringTooNoisy";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ValidationError: return "ValidationError";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace cocycle_clt
