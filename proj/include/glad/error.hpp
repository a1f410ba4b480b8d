#pragma once

#include <stdexcept>
#include <string>

namespace glad {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input outside an operation's mathematical domain (e.g. log of a non-positive value).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Vector too close to zero to normalize.
class DegenerateInputError : public DomainError {
 public:
  using DomainError::DomainError;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

// Tape misuse: backward twice, stale operands, recording on a consumed tape.
class LifecycleError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace glad
