#pragma once

#include <stdexcept>
#include <string>

namespace looplab {

// Error taxonomy used across the library. The what() string carries a
// category prefix so the CLI can report categorized failures.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& m) : std::runtime_error("dimension error: " + m) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error("state error: " + m) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& m) : std::runtime_error("index error: " + m) {}
};

struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& m) : std::runtime_error("lookup error: " + m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& m)
        : std::runtime_error("degenerate input: " + m) {}
};

// Raised when training hits a state it cannot recover from (e.g. non-finite
// gradients). The trainer converts this into a "diverged" verdict.
struct TrainingFault : std::runtime_error {
    explicit TrainingFault(const std::string& m) : std::runtime_error("training fault: " + m) {}
};

}  // namespace looplab
