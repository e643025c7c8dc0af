#pragma once

#include <stdexcept>
#include <string>

namespace dern {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// shape / dimension mismatch between operands
struct dim_error : error {
    using error::error;
};

// invalid parameter value (out-of-range alpha, k, ...)
struct arg_error : error {
    using error::error;
};

// file problems: missing, malformed header, truncated payload
struct io_error : error {
    using error::error;
};

// NaN/Inf or otherwise degenerate numerical state
struct numeric_error : error {
    using error::error;
};

} // namespace dern
