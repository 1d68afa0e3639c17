#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spectral {

/// Failure categories raised by the library. Each maps onto one of the CLI exit
/// codes (see `exit_code_for`).
enum class ErrorCode {
  // tensor_io
  UnsupportedDtype,
  UnsupportedRank,
  MalformedHeader,
  NonFiniteValue,
  MalformedContainer,
  OffsetOutOfBounds,
  OverlappingRanges,
  DimensionMismatch,
  MalformedManifest,
  Io,
  // spectra
  ConvergenceFailure,
  ZeroMatrix,
  ZeroInFitRange,
  TooFewValues,
  SingleValue,
  DegenerateGap,
  // timelapse
  MissingLayer,
  TooFewOnsets,
  MissingStep,
  SparseProfile,
  MalformedLog,
  // fits
  DegenerateX,
  NonPositiveInput,
  TooFewPoints,
  TooFewModels,
  // twotimescale
  InvalidConfig,
  Instability,
  NoisyTrajectory,
  // prune
  BoundaryTooLarge,
  InfeasibleSelection,
  MissingInput,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::UnsupportedRank: return "UnsupportedRank";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::MalformedContainer: return "MalformedContainer";
    case ErrorCode::OffsetOutOfBounds: return "OffsetOutOfBounds";
    case ErrorCode::OverlappingRanges: return "OverlappingRanges";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::MalformedManifest: return "MalformedManifest";
    case ErrorCode::Io: return "Io";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::ZeroMatrix: return "ZeroMatrix";
    case ErrorCode::ZeroInFitRange: return "ZeroInFitRange";
    case ErrorCode::TooFewValues: return "TooFewValues";
    case ErrorCode::SingleValue: return "SingleValue";
    case ErrorCode::DegenerateGap: return "DegenerateGap";
    case ErrorCode::MissingLayer: return "MissingLayer";
    case ErrorCode::TooFewOnsets: return "TooFewOnsets";
    case ErrorCode::MissingStep: return "MissingStep";
    case ErrorCode::SparseProfile: return "SparseProfile";
    case ErrorCode::MalformedLog: return "MalformedLog";
    case ErrorCode::DegenerateX: return "DegenerateX";
    case ErrorCode::NonPositiveInput: return "NonPositiveInput";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::TooFewModels: return "TooFewModels";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Instability: return "Instability";
    case ErrorCode::NoisyTrajectory: return "NoisyTrajectory";
    case ErrorCode::BoundaryTooLarge: return "BoundaryTooLarge";
    case ErrorCode::InfeasibleSelection: return "InfeasibleSelection";
    case ErrorCode::MissingInput: return "MissingInput";
  }
  return "Unknown";
}

class SpectralError : public std::runtime_error {
 public:
  SpectralError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// 2 for malformed inputs, 3 for failures while computing on valid inputs.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnsupportedDtype:
    case ErrorCode::UnsupportedRank:
    case ErrorCode::MalformedHeader:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::MalformedContainer:
    case ErrorCode::OffsetOutOfBounds:
    case ErrorCode::OverlappingRanges:
    case ErrorCode::MalformedManifest:
    case ErrorCode::MalformedLog:
    case ErrorCode::Io:
    case ErrorCode::MissingInput:
    case ErrorCode::InvalidConfig:
      return 2;
    default:
      return 3;
  }
}

}  // namespace spectral
