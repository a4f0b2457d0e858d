#pragma once

#include <stdexcept>
#include <string>

namespace standin {

// Error categories. The CLI maps them onto process exit codes.

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class CacheError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when training produces a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// I/O and dataset problems; the message carries the offending path.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace standin
