/// @file errors.hpp
/// @brief Structured error type shared by all mgpde components.

#pragma once

#include <stdexcept>
#include <string>

namespace mgpde {

/// Error category, mapped to CLI exit codes (config=2, numeric=3, io=4).
enum class ErrorKind {
    Shape,    ///< tensor/grid shape mismatch (numeric failure at CLI level)
    Config,   ///< invalid configuration or argument
    Numeric,  ///< solver divergence, NaN loss, non-convergence
    Io,       ///< file format, truncation, missing file
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    static Error shape(const std::string& msg) { return {ErrorKind::Shape, msg}; }
    static Error config(const std::string& msg) { return {ErrorKind::Config, msg}; }
    static Error numeric(const std::string& msg) { return {ErrorKind::Numeric, msg}; }
    static Error io(const std::string& msg) { return {ErrorKind::Io, msg}; }

private:
    ErrorKind kind_;
};

}  // namespace mgpde
