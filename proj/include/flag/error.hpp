#pragma once

#include <stdexcept>
#include <string>

namespace flag {

/// Failure classes. Each maps onto one CLI exit code.
enum class ErrorKind {
    usage,    // bad flags or arguments
    data,     // malformed files, hash mismatches, shape mismatches between artifacts
    numeric,  // non-finite values, divergence, domain errors
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Operand shapes do not conform.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Argument outside the domain of a function (log of a non-positive value, ...).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::usage: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numeric: return 3;
    }
    return 3;
}

}  // namespace flag
