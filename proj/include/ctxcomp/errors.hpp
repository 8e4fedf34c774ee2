#pragma once

#include <stdexcept>
#include <string>

namespace ctxcomp {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// catch one type; the subclasses distinguish contract violations from bad
// input data and from numeric blowups.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration: unknown family, unknown preset, invalid tier, ...
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data problems: exhausted stream, malformed file, quota overflow.
class DataError : public Error {
 public:
  using Error::Error;
};

// API contract violations: wrong lengths, empty reference, frozen-decoder
// tampering. These indicate a caller bug, not an environment problem.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Sequence does not fit the model's position budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf gradients, divergence, undefined statistics.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxcomp
