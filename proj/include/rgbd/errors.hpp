#pragma once

#include <stdexcept>
#include <string>

namespace rgbd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or channel-count mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// A caller broke an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// Malformed serialized data (tensor files, RLE, JSON).
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// A dataset invariant does not hold.
struct ValidationError : Error {
    using Error::Error;
};

// Scene synthesis could not satisfy its constraints.
struct GenerationError : Error {
    using Error::Error;
};

// Inconsistent model or run configuration.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace rgbd
