#pragma once

#include <stdexcept>
#include <string>

namespace kcqrl {

// Malformed input files, invariant violations and bad arguments.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Completion backend failures (transport, exhausted retries, unparseable output).
struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradients, degenerate numeric inputs.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kcqrl
