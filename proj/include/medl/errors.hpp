#ifndef MEDL_ERRORS_HPP
#define MEDL_ERRORS_HPP

#include <stdexcept>

namespace medl {

// Error categories aligned with the CLI exit codes:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace medl

#endif  // MEDL_ERRORS_HPP
