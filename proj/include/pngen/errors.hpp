#pragma once

#include <stdexcept>
#include <string>

namespace pngen {

// Bad user-supplied configuration (invalid parameter combinations, missing
// files named in a config, indivisible sizes, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated call contract (shape mismatch, empty input set, degenerate
// arguments). Indicates a programming error at the call site.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_contract(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

inline void check_config(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace pngen
