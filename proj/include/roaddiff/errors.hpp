#pragma once

#include <stdexcept>
#include <string>

namespace roaddiff {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Contract violations: caller passed something the API does not accept.
// The CLI maps every ContractError subtype to exit code 2.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class InvalidLaneCount : public ContractError {
 public:
  using ContractError::ContractError;
};

class ZeroDegree : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

class CheckpointError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Data problems: the input files or series are malformed. Exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ContractError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 3;
  return 1;
}

}  // namespace roaddiff
