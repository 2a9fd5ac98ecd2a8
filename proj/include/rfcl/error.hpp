#pragma once

#include <stdexcept>
#include <string>

namespace rfcl {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or widths.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of an operation (log of nonpositive, empty scope, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the computation tape or another stateful object.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (CIFAR records, CSV artifacts).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace rfcl
