#pragma once

#include <stdexcept>
#include <string>

namespace mclr {

// Malformed input data: bad files, corrupt tensors, schema violations.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Requested values outside a documented domain (layer/step ranges, shapes).
class RangeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values in a computation that requires finite input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mclr
