#pragma once

#include <stdexcept>
#include <string>

namespace tpsgtr {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes (names both operands in the message).
struct DimensionError : Error {
  using Error::Error;
};

// Invalid argument value (bad order, unknown label, empty input, ...).
struct ArgumentError : Error {
  using Error::Error;
};

// API contract violation (non-scalar loss, non-deterministic function,
// cross-tape operands).
struct ContractError : Error {
  using Error::Error;
};

// Configuration file / schema problems. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// File system and serialization failures. CLI exit code 3.
struct IoError : Error {
  using Error::Error;
};

// Unreadable or truncated checkpoint / dataset content.
struct CorruptFileError : IoError {
  using IoError::IoError;
};

// Checkpoint format version not supported by this build.
struct VersionError : Error {
  using Error::Error;
};

// Training produced a non-finite loss. CLI exit code 4.
struct DivergenceError : Error {
  using Error::Error;
};

// Checkpoint and dataset disagree on dimensions. CLI exit code 5.
struct MismatchError : Error {
  using Error::Error;
};

}  // namespace tpsgtr
