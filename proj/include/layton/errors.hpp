#pragma once

#include <stdexcept>
#include <string>

namespace layton {

// Error categories used across the pipeline. Callers that care about the
// category catch the concrete type; the CLI maps them to exit codes.

struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error("contract violation: " + msg) {}
};

struct StageOrderError : std::runtime_error {
    explicit StageOrderError(const std::string& msg) : std::runtime_error("stage-ordering error: " + msg) {}
};

struct TrainingDivergence : std::runtime_error {
    explicit TrainingDivergence(const std::string& msg) : std::runtime_error("training divergence: " + msg) {}
};

struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error("integrity error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

#define LAYTON_CHECK(cond, msg)                                        \
    do {                                                               \
        if (!(cond)) throw ::layton::ContractViolation(msg);           \
    } while (0)

}  // namespace layton
