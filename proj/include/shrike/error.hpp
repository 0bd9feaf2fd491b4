#pragma once

#include <stdexcept>
#include <string>

namespace shrike {

// Base for all recoverable errors raised by the library. Commands map these
// to exit code 1; anything else is an internal error (exit code 2).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Unknown object/predicate token in an annotation document.
class VocabularyError : public InvalidInputError {
 public:
  using InvalidInputError::InvalidInputError;
};

// Structurally malformed annotation or dataset document.
class SchemaError : public InvalidInputError {
 public:
  using InvalidInputError::InvalidInputError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace shrike
