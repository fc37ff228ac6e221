#pragma once

#include <stdexcept>
#include <string>

namespace clsr {

// Error taxonomy used across the library. All derive from std::runtime_error
// so callers may catch coarsely; tests catch the precise type.

// Shape/extent disagreement between tensors.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Caller passed a value outside the documented domain (e.g. temperature <= 0).
struct ParameterError : std::runtime_error {
    explicit ParameterError(const std::string& msg) : std::runtime_error("parameter error: " + msg) {}
};

// A documented precondition of an operation was violated.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// A language was requested that the layer/model does not hold.
struct RoutingError : std::runtime_error {
    explicit RoutingError(const std::string& msg) : std::runtime_error("routing error: " + msg) {}
};

// Checkpoint load failure (missing language, corrupt file, ...).
struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& msg) : std::runtime_error("load error: " + msg) {}
};

// Tokenizer met a symbol outside the vocabulary.
struct EncodingError : std::runtime_error {
    explicit EncodingError(const std::string& msg) : std::runtime_error("encoding error: " + msg) {}
};

// Experiment configuration is malformed.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

}  // namespace clsr
