// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace eoe {

// Base of every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (negative variance,
// empty loss average, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// NaN or Inf met where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad caller input such as an out-of-range token id.
class InputError : public Error {
public:
    using Error::Error;
};

// API misuse: mismatched tape/expert, config/store mismatch, invalid config.
class UsageError : public Error {
public:
    using Error::Error;
};

// On-disk data is malformed.
class FormatError : public Error {
public:
    using Error::Error;
};

// File ends before the length its header declares.
class LengthError : public FormatError {
public:
    using FormatError::FormatError;
};

// Decoded values violate a documented invariant (token >= vocab_size).
class ValidationError : public FormatError {
public:
    using FormatError::FormatError;
};

// Not enough data to satisfy a sampling request.
class CapacityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace eoe
