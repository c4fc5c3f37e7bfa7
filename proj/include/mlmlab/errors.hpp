#pragma once

#include <stdexcept>
#include <string>

namespace mlmlab {

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces a non-finite value or an inference
// quantity degenerates (zero marginal, infeasible interpolation, ...).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InferenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ArgumentError(msg);
}

}  // namespace mlmlab
