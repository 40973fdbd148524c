#pragma once

#include <stdexcept>
#include <string>

namespace tagforge {

/// Bad user input: malformed config, wrong channel counts, unusable paths.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem or serialization failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rejection sampling exhausted its attempt budget.
struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An internal invariant broke; indicates a bug, not bad input.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace tagforge
