#pragma once

#include <stdexcept>
#include <string>

namespace circuitedit {

// Exception hierarchy. The CLI maps each family onto a stable exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Misuse of a tape: double backward, foreign handle, nested recording.
class TapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File system or format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace circuitedit
