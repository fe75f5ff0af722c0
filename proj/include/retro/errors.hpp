#pragma once

#include <stdexcept>
#include <string>

namespace retro {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not compose (matmul inner dims, conv output size, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller violated an API contract (backward twice, gradient-carrying keys, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Mathematically degenerate input, e.g. normalizing a zero vector.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace retro
