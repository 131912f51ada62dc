#pragma once

#include <stdexcept>
#include <string>

namespace phaseflow {

/// Bad input data: sequences, files, labels. Maps to CLI exit code 3.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary container problems. Each kind is reported distinctly.
enum class FormatErrorKind { kBadMagic, kBadVersion, kTruncated, kInconsistentHeader };

class FormatError : public ValidationError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : ValidationError(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

/// Non-finite loss or gradient, normalization collapse. Exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of an API or CLI: bad flags, wrong mode, unwritable paths. Exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace phaseflow
