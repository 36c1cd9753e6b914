#pragma once

#include <stdexcept>
#include <string>

namespace cdkt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree (forward input, loss operands, parameter vectors).
struct ShapeError : Error {
  using Error::Error;
};

// Layer stack is not shape-compatible or the embedding tap is invalid.
struct BuildError : Error {
  using Error::Error;
};

// Operation called in the wrong state, e.g. backward before forward.
struct StateError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Dataset ingestion failures. Each malformed-file condition has its own type.
struct FormatError : Error {
  using Error::Error;
};
struct WrongMagicError : FormatError {
  using FormatError::FormatError;
};
struct TruncatedFileError : FormatError {
  using FormatError::FormatError;
};
struct CountMismatchError : FormatError {
  using FormatError::FormatError;
};
struct RecordSizeError : FormatError {
  using FormatError::FormatError;
};

// Not enough data to satisfy a partition request.
struct DataError : Error {
  using Error::Error;
};

}  // namespace cdkt
