// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cilab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input lies where an op is undefined (zero norm, non-finite result).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition of the API.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Evaluation or streaming protocol violated. Maps to CLI exit code 3.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A continuous batch cannot supply the tuples a loss needs.
class StreamStarvationError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

/// Reading or writing files failed or found inconsistent content. Exit code 4.
class PersistenceError : public Error {
 public:
  using Error::Error;
};

/// Snapshot and network disagree on parameter names or shapes.
class SnapshotError : public Error {
 public:
  using Error::Error;
};

}  // namespace cilab
