#pragma once

#include <stdexcept>
#include <string>

namespace hyperlab {

// Error taxonomy mirrors the CLI exit codes: usage/input problems, missing
// artifacts, lineage violations and numeric failures are distinct classes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad values passed by a caller (out-of-vocab token, empty sample set, ...).
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

// Inconsistent or unsupported configuration (Q*D mismatch, shift < 1, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Misuse of a stateful protocol (decode step out of order, k over budget).
struct ProtocolError : Error {
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

// A referenced checkpoint/corpus/report file does not exist.
struct MissingArtifactError : Error {
    explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

// Stage graph violation (e.g. refl on a parent that is not adp).
struct LineageError : Error {
    explicit LineageError(const std::string& msg) : Error(msg) {}
};

// Divergence, NaN loss, mode collapse; carries the failing step when known.
struct NumericError : Error {
    explicit NumericError(const std::string& msg, long step = -1)
        : Error(step >= 0 ? msg + " (step " + std::to_string(step) + ")" : msg), step_index(step) {}
    long step_index;
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace hyperlab
