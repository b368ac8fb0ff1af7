#pragma once

#include <stdexcept>
#include <string>

namespace droppatch {

// Each category maps onto one CLI exit code (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Shape or extent mismatch between tensors or against an expected architecture.
class DimensionError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Caller violated an API precondition (wrong call order, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace droppatch
