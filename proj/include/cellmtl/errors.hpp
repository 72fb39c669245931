#pragma once

#include <stdexcept>
#include <string>

namespace cellmtl {

/// Shape mismatch between operands. The message names the offending axes.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite values are required.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::string block_path = {})
      : std::runtime_error(what), block_path_(std::move(block_path))
    { }

    const std::string& block_path() const { return block_path_; }

private:
    std::string block_path_;
};

/// Invalid user-supplied data (labels out of range, empty inputs, ...).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dataset or checkpoint could not be materialized.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unknown configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace cellmtl
