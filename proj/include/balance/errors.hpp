#pragma once

#include <stdexcept>
#include <string>

namespace balance {

// Bad labels, unknown keys, conflicting options.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs outside an operation's domain (empty group, n too small, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Matrix or vector dimensions that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Factorization failures, non-finite objectives.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An estimator cannot be evaluated on the given weights (e.g. a group was
// trimmed away entirely).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace balance
