#pragma once

#include <stdexcept>
#include <string>

namespace convctx {

// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes or axis arguments.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A caller violated an API contract (e.g. backward on a non-scalar,
// softmax over a fully masked row).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Bad input data (empty utterance, out-of-range token id, unreadable file).
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

// Non-finite values encountered during training.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace convctx
