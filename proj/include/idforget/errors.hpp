#pragma once

#include <stdexcept>
#include <string>

namespace idf {

// Input tensors or parameter sets disagree on shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced NaN/Inf, or was handed one.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A direction vector had (near) zero length and cannot be normalized.
class DegenerateDirectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Backward pass reached an operation that has no gradient rule.
class UnsupportedOpError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed configuration or out-of-range argument.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An identity id outside the world.
class UnknownIdentityError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Artifact on disk is missing or cannot be parsed.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idf
