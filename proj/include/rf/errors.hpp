#pragma once

#include <stdexcept>
#include <string>

namespace rf {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user input: malformed config, shape mismatch, unknown key, out-of-range site.
struct config_error : error {
    using error::error;
};

// Numeric failure at runtime: non-finite activation/gradient, degenerate system.
struct numeric_error : error {
    using error::error;
};

// Checkpoint / file-format problems.
struct io_error : error {
    using error::error;
};

} // namespace rf
