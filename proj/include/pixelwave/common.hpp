#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pixelwave {

// Error taxonomy. Every failure mode maps onto one of these so callers
// (and the CLI) can report a machine-readable kind.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent mismatch between tensors.
struct dimension_error : error {
    using error::error;
};

// A caller-supplied value violates an operation's precondition.
struct input_error : error {
    using error::error;
};

// Invalid static configuration (model hyperparameters, CLI flags).
struct config_error : error {
    using error::error;
};

// Required runtime state is missing or inconsistent (uninitialized
// codebook, absent checkpoint section, digest mismatch).
struct state_error : error {
    using error::error;
};

// Numerical failure: divergence, non-convergence, NaN gradients.
struct numeric_error : error {
    using error::error;
};

// Result is mathematically undefined for the given input
// (e.g. Pearson correlation of a zero-variance series).
struct undefined_error : error {
    using error::error;
};

inline const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const dimension_error*>(&e)) return "dimension";
    if (dynamic_cast<const input_error*>(&e)) return "input";
    if (dynamic_cast<const config_error*>(&e)) return "config";
    if (dynamic_cast<const state_error*>(&e)) return "state";
    if (dynamic_cast<const numeric_error*>(&e)) return "numeric";
    if (dynamic_cast<const undefined_error*>(&e)) return "undefined";
    return "error";
}

}  // namespace pixelwave
