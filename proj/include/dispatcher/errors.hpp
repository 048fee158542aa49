#pragma once

#include <stdexcept>
#include <string>

namespace dispatcher {

// Base class for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated precondition (bad argument, misuse of the autograd graph).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model was built for.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Malformed or insufficient input data (corpus, checkpoint, token ids).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dispatcher
