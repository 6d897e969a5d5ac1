#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mixsearch {

enum class Errc {
  ShapeMismatch,
  UnsupportedConfig,
  NonScalarOutput,
  NonFinite,
  OddSpatialSize,
  InvalidQuery,
  InvalidHyperparameter,
  WeightSumViolation,
  EmptyInput,
  InsufficientSamples,
  InfeasibleGrid,
  IncompatibleGenotype,
  TooSmall,
  NonFiniteLoss,
  DegenerateSpec,
  EmptyDataset,
  IoFailure,
  InvalidConfig,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnsupportedConfig: return "UnsupportedConfig";
    case Errc::NonScalarOutput: return "NonScalarOutput";
    case Errc::NonFinite: return "NonFinite";
    case Errc::OddSpatialSize: return "OddSpatialSize";
    case Errc::InvalidQuery: return "InvalidQuery";
    case Errc::InvalidHyperparameter: return "InvalidHyperparameter";
    case Errc::WeightSumViolation: return "WeightSumViolation";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::InsufficientSamples: return "InsufficientSamples";
    case Errc::InfeasibleGrid: return "InfeasibleGrid";
    case Errc::IncompatibleGenotype: return "IncompatibleGenotype";
    case Errc::TooSmall: return "TooSmall";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::DegenerateSpec: return "DegenerateSpec";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::IoFailure: return "IoFailure";
    case Errc::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mixsearch
