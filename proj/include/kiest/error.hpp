#pragma once

#include <stdexcept>
#include <string>

namespace kiest {

// Base of every error raised by the library. The CLI maps the categories to
// exit codes (contract-like errors -> 1, I/O -> 2, verification -> 3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// A state change string that does not follow the
// "[attr] of [entity] was [before] before and [after] afterwards" template.
class MalformedTemplate : public Error {
public:
    MalformedTemplate(const std::string& reason, std::string text)
        : Error("malformed template (" + reason + "): " + text), text_(std::move(text)) {}
    const std::string& text() const { return text_; }

private:
    std::string text_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class VerificationError : public Error {
public:
    using Error::Error;
};

}  // namespace kiest
