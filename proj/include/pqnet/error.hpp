#pragma once

#include <stdexcept>
#include <string>

namespace pqnet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Weighted k-means could not populate every cluster.
class DegenerateDataError : public Error {
public:
    DegenerateDataError(const std::string& what, std::size_t cluster)
        : Error(what), cluster_(cluster) {}
    std::size_t cluster() const noexcept { return cluster_; }

private:
    std::size_t cluster_;
};

/// Loss became non-finite during training or finetuning.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Codebook index out of range when decoding weights.
class CorruptionError : public Error {
public:
    using Error::Error;
};

/// Architecture config grammar error. `line()` is 1-based.
class ConfigError : public Error {
public:
    ConfigError(std::size_t line, const std::string& msg)
        : Error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

enum class ParseErrorKind {
    BadMagic,
    VersionMismatch,
    Truncated,
    IndexOutOfRange,
    Malformed,
};

const char* to_string(ParseErrorKind kind);

/// Binary file could not be decoded.
class ParseError : public Error {
public:
    ParseError(ParseErrorKind kind, const std::string& msg)
        : Error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}
    ParseErrorKind kind() const noexcept { return kind_; }

private:
    ParseErrorKind kind_;
};

}  // namespace pqnet
