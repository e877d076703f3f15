#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gridsec {

enum class Errc {
  NonDiagonalTransition,
  EmptySubregion,
  InvalidModel,
  DimensionMismatch,
  SingularInnovation,
  NotANeighbor,
  MissingDelta,
  SingularSigma,
  OutOfDomain,
  InvalidAlpha,
  AlreadyAlarmed,
  MissingBlock,
  MissingSchedule,
  SingularPsi,
  UnknownSender,
  PackageRejected,
  PuzzleRejected,
  FormatError,
  ConfigError,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::NonDiagonalTransition: return "NonDiagonalTransition";
    case Errc::EmptySubregion: return "EmptySubregion";
    case Errc::InvalidModel: return "InvalidModel";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::SingularInnovation: return "SingularInnovation";
    case Errc::NotANeighbor: return "NotANeighbor";
    case Errc::MissingDelta: return "MissingDelta";
    case Errc::SingularSigma: return "SingularSigma";
    case Errc::OutOfDomain: return "OutOfDomain";
    case Errc::InvalidAlpha: return "InvalidAlpha";
    case Errc::AlreadyAlarmed: return "AlreadyAlarmed";
    case Errc::MissingBlock: return "MissingBlock";
    case Errc::MissingSchedule: return "MissingSchedule";
    case Errc::SingularPsi: return "SingularPsi";
    case Errc::UnknownSender: return "UnknownSender";
    case Errc::PackageRejected: return "PackageRejected";
    case Errc::PuzzleRejected: return "PuzzleRejected";
    case Errc::FormatError: return "FormatError";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

// All library failures carry a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace gridsec
