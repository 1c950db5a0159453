#pragma once

#include <stdexcept>
#include <string>

namespace mvfuse {

// Error kinds map 1:1 onto CLI exit codes (config -> 2, io -> 3, numeric -> 4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or value contract violated by an operation's inputs.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// File missing, unreadable, or malformed on disk.
struct IoError : Error {
    using Error::Error;
};

// Non-finite values reached a place that must stay finite.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace mvfuse
