#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffreg {

enum class ErrorCode {
  NonPositiveDepth,
  TooFewCorrespondences,
  DegenerateConfiguration,
  NumericalFailure,
  NoConsensus,
  NotStationary,
  SingularHessian,
  EmptyInput,
  EmptyPatch,
  MissingFeature,
  MissingDepth,
  ShapeMismatch,
  LengthMismatch,
  BadDims,
  ProvenanceMissing,
  DimMismatch,
  StaleProvenance,
  MissingTarget,
  ProviderFailure,
  EmptyCorrespondences,
  EmptyDataset,
  EmptyPatchSet,
  InvalidArgument,
  IoError,
  ParseError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so that
/// callers (the CLI in particular) can map them onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace diffreg
