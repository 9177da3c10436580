#pragma once

#include <stdexcept>
#include <string>

namespace qadv {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A numeric argument is outside its admissible range.
class ParameterError : public Error {
public:
    using Error::Error;
};

// An API was called in a state or with a value its contract forbids.
class UsageError : public Error {
public:
    using Error::Error;
};

// Malformed on-disk data (dataset files, checkpoints, adversarial sets).
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid configuration: bad scheme, missing ensemble member, bad config key.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Training diverged.
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace qadv
