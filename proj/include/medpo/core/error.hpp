#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medpo {

/// Root of every error thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (bad argument, missing field).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed input text. `line` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input that violates a type invariant.
class ValidationError : public Error {
public:
    ValidationError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ExhaustionError : public Error {
public:
    using Error::Error;
};

class RetrievalMiss : public Error {
public:
    using Error::Error;
};

/// Network-level failure talking to an external service (retryable).
class TransportError : public Error {
public:
    using Error::Error;
};

/// The external service answered, but the answer violates the task schema.
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Run-level abort (too many skips, non-finite loss, ...).
class RunError : public Error {
public:
    using Error::Error;
};

}  // namespace medpo
