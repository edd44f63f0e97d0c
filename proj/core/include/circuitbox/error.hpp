#pragma once

#include <stdexcept>
#include <string>

namespace circuitbox {

// Shape or index disagreement between operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A primitive produced NaN/Inf, or an optimization diverged.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing/corrupt file, bad magic, short read.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad CLI/config input.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace circuitbox
