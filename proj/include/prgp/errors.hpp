#ifndef PRGP_ERRORS_HPP
#define PRGP_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace prgp {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration, malformed input file, or I/O failure.
struct ConfigError : Error {
  using Error::Error;
};

/// Numerical failure: ill-conditioned kernel after jitter escalation,
/// non-finite gradient, CFL violation.
struct NumericError : Error {
  using Error::Error;
};

/// Metric is undefined on the given data (e.g. all rows filtered).
struct MetricError : Error {
  using Error::Error;
};

}  // namespace prgp

#endif  // PRGP_ERRORS_HPP
