#pragma once

#include <stdexcept>
#include <string>

namespace hmdc {

// Every failure surfaced by the library derives from Error; `kind()` is the
// short tag the CLI prints in its one-line error record.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

class IngestionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "ingestion"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class IntegrityError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "integrity"; }
};

class NonFiniteError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "non_finite"; }
};

} // namespace hmdc
