#pragma once

#include <stdexcept>
#include <string>

namespace hcct {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extent / dimension mismatches.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values (rates, targets, fractions).
class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// A caller broke an operation's contract (non-scalar loss, empty split, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf appeared, or statistics degenerated (constant input, batch of one).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (bad magic, truncation, inconsistent header).
class ParseError : public IoError {
public:
    explicit ParseError(const std::string& msg) : IoError(msg) {}
};

} // namespace hcct
