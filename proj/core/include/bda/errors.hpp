#pragma once

#include <stdexcept>
#include <string>

namespace bda {

// Invalid or corrupt input data (files, manifests, label values, checkpoints).
// CLI maps this to exit code 2.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value produced by a forward pass or optimizer step.
// CLI maps this to exit code 3.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace bda
