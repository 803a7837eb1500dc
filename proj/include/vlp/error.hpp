#pragma once

#include <stdexcept>
#include <string>

namespace vlp {

// Error families. The CLI maps NumericError to exit code 2 and the rest to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes do not agree (matmul inner dims, elementwise operands, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/inf inputs, zero-norm rows, diverged training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition (non-scalar loss, i > j, bad mask position).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (k > m, c % 4 != 0, non-divisible image size).
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename E>
inline void require(bool cond, const std::string& what) {
  if (!cond) throw E(what);
}

}  // namespace detail
}  // namespace vlp
