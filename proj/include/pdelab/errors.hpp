#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pdelab {

/// Invalid parameters or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Array extents that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or mismatched file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A batch mixing samples of different spatial extent.
class BatchingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A time integration, rollout or optimisation that produced non-finite or
/// runaway values. Carries the step at which it was detected.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace pdelab
