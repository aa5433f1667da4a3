#pragma once

#include <stdexcept>
#include <string>

namespace cnflow {

/// Base class for all library errors.
struct FlowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between tensor operands.
struct ShapeError : FlowError {
  using FlowError::FlowError;
};

/// A NaN or Inf crossed an operation boundary.
struct NumericError : FlowError {
  using FlowError::FlowError;
};

/// Misuse of the computation graph (off-graph tensor, nesting limit, ...).
struct TapeError : FlowError {
  using FlowError::FlowError;
};

/// ODE solver failure.
struct SolverError : FlowError {
  using FlowError::FlowError;
};

/// Step-size underflow or step-count blowup: the dynamics look stiff.
struct StiffnessError : SolverError {
  using SolverError::SolverError;
};

/// Malformed input data (CSV parsing, degenerate columns, ...).
struct DataError : FlowError {
  using FlowError::FlowError;
};

/// Invalid run configuration. The CLI maps this to exit code 2.
struct ConfigError : FlowError {
  using FlowError::FlowError;
};

}  // namespace cnflow
