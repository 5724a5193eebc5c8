#pragma once

#include <stdexcept>
#include <string>

namespace strokenext {

// Base of every error thrown by the library. The CLI maps each subclass to an
// exit code (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or similar numerical breakdown during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Checkpoint file is truncated or its checksum does not match.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Checkpoint was written for a different model configuration.
class FingerprintMismatch : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Two prediction logs do not cover the same sample set.
class ComparisonError : public Error {
 public:
  using Error::Error;
};

class BenchError : public Error {
 public:
  using Error::Error;
};

}  // namespace strokenext
