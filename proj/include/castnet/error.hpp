// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace castnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor or matrix dimensions are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input file could not be ingested (bad timestamps, malformed rows).
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// The augmented Lagrangian loop hit its penalty cap before the acyclicity
/// residual dropped below tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double final_h)
      : Error(what), final_h_(final_h) {}
  double final_h() const noexcept { return final_h_; }

 private:
  double final_h_;
};

/// Thresholded contemporaneous graph still contains a directed cycle.
class CycleError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergence : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was run before the stage producing its inputs.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace castnet
