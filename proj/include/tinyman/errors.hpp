#pragma once

#include <stdexcept>
#include <string>

namespace tinyman {

// Argument outside its admissible interval.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// API used in the wrong state (stepping a finished episode, stale cache...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Vector/matrix/trace length mismatch.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Mathematical domain violation, e.g. log of a non-positive allocation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf encountered in a loss, gradient or parameter.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file content: bad magic, checksum, version, config field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tinyman
