#pragma once

#include <stdexcept>
#include <string>

namespace melon {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or invalid arguments supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (CSV rows, files, manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t row)
      : DataError(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class OrderingError : public DataError {
 public:
  using DataError::DataError;
};

// A window from a validation/test patient reached a training-only path.
class LeakageError : public DataError {
 public:
  LeakageError(const std::string& patient)
      : DataError("patient '" + patient + "' is not assigned to the train split"),
        patient_(patient) {}
  const std::string& patient() const noexcept { return patient_; }

 private:
  std::string patient_;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

// Tensor shape incompatibility inside the computation layer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A statistic that is undefined for the given input (e.g. AUROC with one class).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace melon
