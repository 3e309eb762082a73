#pragma once

#include <stdexcept>
#include <string>

namespace gcnforge {

// Base for every error raised by the library. The CLI maps ValidationError
// (and subclasses) to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed data files, out-of-range options, empty inputs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace gcnforge
