#ifndef MESHGAIT_ERRORS_HPP
#define MESHGAIT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace meshgait {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Bad or missing data on disk, or an unsatisfiable sampling request (CLI exit code 3).
struct DataError : Error {
    using Error::Error;
};

// Malformed file contents (sidecar headers, checkpoints).
struct FormatError : DataError {
    using DataError::DataError;
};

// Tensor dimensions incompatible with an operation.
struct ShapeError : Error {
    using Error::Error;
};

// A documented runtime contract was violated (e.g. unnormalized heatmap).
struct ContractError : Error {
    using Error::Error;
};

} // namespace meshgait

#endif
