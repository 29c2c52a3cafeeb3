#pragma once

#include <stdexcept>
#include <string>

namespace mamlab {

// Error taxonomy. The CLI maps each kind onto a process exit code.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

// Tensor extents violate an operation's shape rule.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A caller broke a documented precondition (non-scalar backward, empty visible set, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Out-of-range scalar parameter (mask ratio, temperature, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Bad user-facing input data (too-short waveform, out-of-range label, empty dataset).
class InputError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

// Malformed binary file (checkpoint, target map).
class FormatError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

// Non-finite loss or parameter.
class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

} // namespace mamlab
