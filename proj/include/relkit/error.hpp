#pragma once

#include <stdexcept>
#include <string>

namespace relkit {

// Input that violates a documented contract: bad files, schema violations,
// shape mismatches. The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failures while computing: I/O, numerical breakdown, degenerate metrics.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A metric that is undefined for the given input (e.g. AUROC with a single class).
class DegenerateInput : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

}  // namespace relkit
