#pragma once

#include <stdexcept>
#include <string>

namespace moco {

// Base class for every error raised by the library. Subclasses map to the
// failure classes surfaced at the CLI: config (exit 2), divergence (exit 3),
// io/format (exit 4).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensor operands.
struct DimensionError : Error {
  using Error::Error;
};

// A caller violated an operation's precondition.
struct ContractError : Error {
  using Error::Error;
};

// An index (class target, sample id) is out of range.
struct IndexError : Error {
  using Error::Error;
};

// A batch-norm shard has fewer than two samples.
struct DegenerateShardError : Error {
  using Error::Error;
};

// A feature row has (near-)zero norm; the encoder output is dead.
struct DegenerateFeatureError : Error {
  using Error::Error;
};

// Persistent state violates its own invariants (e.g. negative running_var).
struct CorruptionError : Error {
  using Error::Error;
};

// Training produced NaN/Inf values.
struct DivergenceError : Error {
  using Error::Error;
};

// A file does not match the expected binary layout (magic, version).
struct FormatError : Error {
  using Error::Error;
};

// The OS failed to read/write, or a file is truncated.
struct IoError : Error {
  using Error::Error;
};

// Two inputs that must agree do not (e.g. image/label counts).
struct ConsistencyError : Error {
  using Error::Error;
};

// Experiment configuration failed validation.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace moco
