#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace i2i {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `line` is 1-based, 0 when the error is not tied to a line.
struct ParseError : Error {
  ParseError(const std::string &what, std::size_t line_ = 0)
      : Error(what), line(line_) {}
  std::size_t line;
};

struct DataError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct DomainError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// A checkpoint file that should exist does not.
struct MissingCheckpointError : Error {
  using Error::Error;
};

/// Cholesky failed on every rung of the jitter ladder.
struct NumericalError : Error {
  NumericalError(const std::string &what, std::vector<double> ladder = {})
      : Error(what), attempted_jitter(std::move(ladder)) {}
  std::vector<double> attempted_jitter;
};

/// Non-finite loss or gradient during an optimisation loop.
struct DivergenceError : Error {
  DivergenceError(const std::string &what, long step_ = -1)
      : Error(what), step(step_) {}
  long step;
};

} // namespace i2i
