#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crobim {

/// Tensor dimensions disagree with a contract.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad scalar argument (out-of-range K, negative epsilon, ...).
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared inside a named module/stage.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Configuration file or preset violates an invariant.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Failure while loading a dataset record or a checkpoint.
class LoadError : public std::runtime_error {
public:
    LoadError(const std::string& what, std::ptrdiff_t record = -1)
        : std::runtime_error(record >= 0 ? "record " + std::to_string(record) + ": " + what : what),
          record_(record) {}

    /// Index of the offending manifest record, or -1 when not record-specific.
    std::ptrdiff_t record() const noexcept { return record_; }

private:
    std::ptrdiff_t record_;
};

}  // namespace crobim
