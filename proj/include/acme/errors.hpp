#pragma once

#include <stdexcept>
#include <string>

namespace acme {

// Error taxonomy maps onto CLI exit codes: ConfigError -> 2,
// InfeasibleError -> 3, NumericError -> 4, everything else -> 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace acme
