#pragma once

#include <stdexcept>
#include <string>

namespace deepstack {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Token id, class label or element index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Numeric hyperparameter outside its domain (e.g. dropout p >= 1).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing user input: empty corpus, overlong sequence, bad file.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff tape (double backward, non-scalar seed, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepstack
