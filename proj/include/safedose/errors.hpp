#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace safedose {

/// Invalid configuration value. `field()` is a dotted path such as "safe_bo.tau".
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, std::string message)
        : std::runtime_error(field + ": " + message), field_(std::move(field)),
          message_(std::move(message)) {}

    const std::string& field() const noexcept { return field_; }
    /// The message without the field prefix.
    const std::string& message() const noexcept { return message_; }

private:
    std::string field_;
    std::string message_;
};

/// Factorization failure. `index()` names the observation whose pivot collapsed.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::size_t index, const std::string& what)
        : std::runtime_error(what), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

class PreconditionError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Operation called in the wrong episode state (e.g. announcing a meal while a window is open).
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Out-of-order timestamps.
class SequencingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class AlignmentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace safedose
