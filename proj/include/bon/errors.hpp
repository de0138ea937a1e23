#pragma once

#include <stdexcept>
#include <string>

namespace bon {

// Invalid user-supplied configuration (bad flag values, inconsistent sizes).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed on-disk data. The message names the line or byte offset.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke a precondition (empty candidate set, wrong shapes, ...).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Internal state no longer satisfies its invariants. Always a bug.
struct InvariantError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite loss or gradient.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Pre-normalization activation too close to zero to normalize.
struct DegenerateEmbedding : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace detail
}  // namespace bon
