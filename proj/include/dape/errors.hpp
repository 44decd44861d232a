#pragma once

#include <stdexcept>
#include <string>

namespace dape {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that cannot be combined (matmul inner dims, grid divisibility, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Hyperparameters or arguments outside their admissible range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// An operation invoked outside the phase it is defined for.
class ContractError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

}  // namespace dape
