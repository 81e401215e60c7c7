#pragma once

#include <stdexcept>
#include <string>

namespace handrec {

// Invalid data from outside: config files, model files, checkpoints, manifests.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A function precondition was violated by the caller (shape mismatch, bad range).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, failed gradient checks, NaN loss.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace handrec
