#pragma once

#include <stdexcept>
#include <string>

namespace advdiff {

// Incompatible extents, ranks, or configured resolutions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation produced NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the autodiff graph (non-scalar root, untraced root).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or unsupported file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid parameter values or configuration documents.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace advdiff
