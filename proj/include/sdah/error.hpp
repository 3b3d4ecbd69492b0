#pragma once

#include <stdexcept>
#include <string>

namespace sdah {

/// Tensor geometry violated an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf was produced. Never propagated silently.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the autodiff graph (e.g. a second backward over a consumed graph).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed file, config, or dataset content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sdah
