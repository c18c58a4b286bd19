#ifndef MSM_ERRORS_HPP
#define MSM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace msm {

// Invalid or inconsistent configuration (divisibility, positivity, ...).
struct ConfigurationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad argument to an otherwise well-configured operation.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Iterative method failed to converge, or a numerical target is unreachable.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Problem exceeds a configured size cap.
struct ResourceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Measurement or input data is unusable (out of domain, duplicates, malformed files).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Diagnostics input carries no information (zero variance everywhere, singular W).
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace msm

#endif
