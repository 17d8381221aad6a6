#pragma once

#include <stdexcept>
#include <string>

namespace cmscan {

// Error taxonomy mapped to CLI exit codes: ConfigError -> 2, IoError -> 3,
// NumericError -> 4. ShapeError and ContractError are programming/usage
// faults and map to 2 as well.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

// Thrown when an API is driven out of contract (e.g. backward without a
// recorded forward).
struct ContractError : Error {
    using Error::Error;
};

}  // namespace cmscan
