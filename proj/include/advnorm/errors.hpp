#pragma once

#include <stdexcept>
#include <string>

namespace advnorm {

/// Bad inputs, bad configs, malformed files. CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// File does not look like one of our containers at all.
class FormatError : public ValidationError {
public:
    explicit FormatError(const std::string& what) : ValidationError(what) {}
};

/// Container header parsed but payload is inconsistent with it.
class CorruptionError : public ValidationError {
public:
    explicit CorruptionError(const std::string& what) : ValidationError(what) {}
};

/// Non-finite loss or gradient during optimization. CLI maps this to exit code 2.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace advnorm
