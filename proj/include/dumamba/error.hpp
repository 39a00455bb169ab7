#pragma once

#include <stdexcept>
#include <string>

namespace dumamba {

// Precision-independent so that error handling in the CLI is shared
// between the f32 and f64 builds.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN/Inf, or a loss became non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

/// Tape misuse: detached roots, non-scalar roots, double backward.
class AutogradError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// File content does not follow the documented binary layout.
class FormatError : public IoError {
 public:
  enum class Kind { kBadMagic, kUnknownVersion, kTruncated, kMismatch };
  FormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dumamba
