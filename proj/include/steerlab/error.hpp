#pragma once

#include <stdexcept>
#include <string>

namespace steerlab {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violates a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// The backend does not support the requested operation (e.g. head access).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Backend is in use and cannot be mutated, or vice versa.
class AccessError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A fold's steering vector was trained on its own held-out scenario.
class LeakageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Latency arms produced different token counts.
class UnequalLengthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace steerlab
