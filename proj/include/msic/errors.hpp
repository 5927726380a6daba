#pragma once

#include <stdexcept>
#include <string>

namespace msic {

// Shape or layout contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value left the finite range, or a matrix became numerically singular.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed weights file, bitstream, image or config text.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bitstream was produced by a model with a different configuration.
class ConfigMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Argument outside its documented range (quality value, sigma, ...).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

}  // namespace msic
