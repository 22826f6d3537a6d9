#pragma once

#include <stdexcept>
#include <string>

namespace patternmine {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Problems with input data: missing files, undecodable images, bad manifests.
class DataError : public Error {
public:
  using Error::Error;
};

/// Shape or channel-count disagreement between two operands.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Violated precondition of an operation (empty dataset, degenerate box, ...).
class PreconditionError : public Error {
public:
  using Error::Error;
};

enum class FormatErrorKind { BadMagic, VersionMismatch, Truncated, NonFinite, Io };

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
  case FormatErrorKind::BadMagic: return "bad magic";
  case FormatErrorKind::VersionMismatch: return "version mismatch";
  case FormatErrorKind::Truncated: return "truncated payload";
  case FormatErrorKind::NonFinite: return "non-finite value";
  case FormatErrorKind::Io: return "i/o failure";
  }
  return "unknown";
}

/// Malformed binary file or non-finite feature values.
class FormatError : public DataError {
public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : DataError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const noexcept { return kind_; }

private:
  FormatErrorKind kind_;
};

} // namespace patternmine
