#pragma once

#include <stdexcept>
#include <string>

namespace cdmamba {

// Shape or configuration mismatch between tensors/modules.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value detected, or an optimizer/loss numeric failure.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or unreadable file, bad container magic, unknown config key.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cdmamba
