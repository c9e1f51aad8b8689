#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nlv {

enum class ErrorKind {
  NoEligibleWord,
  NoEligibleTarget,
  ParseError,
  UnknownLabel,
  DegenerateSplit,
  EmbedderFailure,
  DimMismatch,
  EmptyClass,
  KTooLarge,
  AllPositivesEvicted,
  RegionMismatch,
  NumericalFailure,
  InvalidArgument,
  ConfigError,
  IoError,
  EmptySet,
  MissingUpstream,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers switch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace nlv
