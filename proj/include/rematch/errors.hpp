// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace rematch {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ValidationError -> 2, NumericError -> 3, IoError (and subtypes) -> 4.
// Everything else (ShapeError, ContractError, ...) indicates a programming
// error at an API boundary and also maps to 2 when it escapes the CLI.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up (matmul inner dims, concat widths, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A size budget was exceeded (sequence longer than max_seq_len, ...).
class CapacityError : public Error {
 public:
  using Error::Error;
};

// A token id is outside [0, vocab_size).
class VocabError : public Error {
 public:
  using Error::Error;
};

// A vector that must have a direction has (near-)zero norm.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated (empty candidate list, bad argument, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// User-supplied configuration or data failed validation. Exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A runtime numeric failure (non-finite loss or gradient). Exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Filesystem / serialization failure. Exit code 4.
class IoError : public Error {
 public:
  using Error::Error;
};

// File exists but its magic/header bytes are not what the format requires.
class CorruptHeaderError : public IoError {
 public:
  using IoError::IoError;
};

// Header parsed but declares an unsupported format version.
class FormatVersionError : public IoError {
 public:
  using IoError::IoError;
};

// Header promised more payload bytes than the file contains.
class TruncatedFileError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace rematch
