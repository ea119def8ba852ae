// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mote {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shape or dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid model or corpus configuration; message names the offending field.
struct ConfigError : Error {
  using Error::Error;
};

/// Task identifier not present in the registry.
struct UnregisteredTaskError : Error {
  using Error::Error;
};

/// Input sequence too long (or empty) for the model.
struct LengthError : Error {
  using Error::Error;
};

/// Checkpoint or spill file cannot be read back consistently.
struct LoadError : Error {
  using Error::Error;
};

/// Residency change failed; the model was rolled back to all-resident.
struct ResidencyError : Error {
  using Error::Error;
};

/// Malformed input line; message carries the line number.
struct ParseError : Error {
  using Error::Error;
};

/// A batch-level operation received no elements.
struct EmptyBatchError : Error {
  using Error::Error;
};

/// Degenerate numeric input (zero-norm vector, non-unit embedding, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

/// A loss function gave different values on repeated evaluation.
struct DeterminismError : Error {
  using Error::Error;
};

/// NaN gradient during training; message names the parameter path.
struct DivergenceError : Error {
  using Error::Error;
};

/// Metric undefined on this input (no positives, constant sample, ...).
struct UndefinedMetricError : Error {
  using Error::Error;
};

/// Filesystem failure; message carries the path.
struct IoError : Error {
  using Error::Error;
};

}  // namespace mote
