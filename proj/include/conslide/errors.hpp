#pragma once

#include <stdexcept>
#include <string>

namespace conslide {

/// Shape or rank mismatch between operands.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value (model, training, generator or CLI).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation called in a state that does not support it.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf produced or consumed.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorCode {
  kIo = 1,
  kBadMagic = 2,
  kUnsupportedVersion = 3,
  kTruncated = 4,
  kChecksumMismatch = 5,
  kInvalidContent = 6,
};

const char* to_string(FormatErrorCode code);

/// Failure reading or writing one of the binary container formats.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  FormatErrorCode code() const noexcept { return code_; }

 private:
  FormatErrorCode code_;
};

}  // namespace conslide
