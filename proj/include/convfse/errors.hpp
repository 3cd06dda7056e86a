#pragma once

#include <stdexcept>
#include <string>

namespace convfse {

// Error taxonomy mirrors the CLI exit-code contract:
// usage/config problems -> 1, bad input data -> 2, numerical failure -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/config mismatches inside the library are usage errors.
struct ShapeError : UsageError {
  using UsageError::UsageError;
};

}  // namespace convfse
