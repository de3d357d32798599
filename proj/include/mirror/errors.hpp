#pragma once

#include <stdexcept>
#include <string>

namespace mirror {

// Base for all library errors. The CLI maps ValidationError to exit code 1
// and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violates a documented invariant or precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file exists but its contents are malformed (bad magic, truncation, version).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Shapes read from disk disagree with each other or with the manifest.
class DimensionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training diverged or produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mirror
