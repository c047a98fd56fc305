#pragma once

#include <stdexcept>
#include <string>

namespace mhmc {

// Base of every error raised by the library. The bench harness maps
// ConfigError to exit code 2 and everything numerical to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotAntisymmetric : public Error {
 public:
  NotAntisymmetric(int row, int col, double residual);
  int row() const { return row_; }
  int col() const { return col_; }
  double residual() const { return residual_; }

 private:
  int row_;
  int col_;
  double residual_;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class NotSPD : public Error {
 public:
  using Error::Error;
};

class NonFinite : public Error {
 public:
  using Error::Error;
};

class SingularMatrix : public Error {
 public:
  using Error::Error;
};

class ZeroVariance : public Error {
 public:
  using Error::Error;
};

class TooFewChains : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhmc
