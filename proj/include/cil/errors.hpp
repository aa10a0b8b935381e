#pragma once

#include <stdexcept>
#include <string>

namespace cil {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (target outside mask, empty buffer, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autograd tape.
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// CLDS1 / CLCKPT1 container errors. Each failure mode has its own type so
// callers (and tests) can tell them apart.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class LabelRangeError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace cil
