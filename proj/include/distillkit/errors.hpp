#pragma once

#include <stdexcept>
#include <string>

namespace distillkit {

// Base of every error raised by the library. The CLI maps the concrete
// type to an exit code (config -> 2, resource -> 3, everything else -> 1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, arity or architecture description.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed call inputs: shape mismatch, out-of-range labels, bad images.
class InputError : public Error {
 public:
  using Error::Error;
};

// A required artifact (checkpoint, weights file) is missing.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// Math domain violation, e.g. non-positive temperature.
class DomainError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training diverged (NaN/Inf loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace distillkit
