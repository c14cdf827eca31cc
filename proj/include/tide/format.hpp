#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tide {

enum class FormatErrorKind {
  Io,
  BadMagic,
  VersionMismatch,
  Truncated,
  DimensionMismatch,
  ChecksumMismatch,
};

const char* to_string(FormatErrorKind kind);

/// Failure while reading or writing one of the binary containers.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace tide
