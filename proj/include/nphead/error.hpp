#pragma once

#include <stdexcept>
#include <string>

namespace nphead {

// Violated shape or argument contract inside a library call.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// A configuration value is out of its allowed range.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// User-supplied data failed validation (bad vote, bad session payload, ...).
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NotFoundError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stored data is corrupt (bad magic, out-of-range codes, hash mismatch).
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values showed up during training.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace nphead
