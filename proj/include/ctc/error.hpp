#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ctc {

/// Base class for every error raised by the library. Each category maps to a
/// process exit status used by the command-line tool.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what, 2) {}
};

/// Malformed input text. Row and column are 1-based; 0 means "not applicable".
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : ValidationError(format(what, row, column)), row_(row), column_(column) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& what, std::size_t row, std::size_t column) {
    std::string out = what;
    if (row > 0) out += " (row " + std::to_string(row);
    if (row > 0 && column > 0) out += ", column " + std::to_string(column);
    if (row > 0) out += ")";
    return out;
  }
  std::size_t row_;
  std::size_t column_;
};

/// An optimizer or estimator failed to settle. Carries the best point seen.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> best, double best_value)
      : Error(what, 3), best_(std::move(best)), best_value_(best_value) {}
  const std::vector<double>& best() const noexcept { return best_; }
  double best_value() const noexcept { return best_value_; }

 private:
  std::vector<double> best_;
  double best_value_;
};

/// An identification assumption (positivity, no information drift) is violated
/// by the data at hand.
class AssumptionError : public Error {
 public:
  explicit AssumptionError(const std::string& what) : Error(what, 4) {}
};

class PositivityError : public AssumptionError {
 public:
  using AssumptionError::AssumptionError;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, 5) {}
};

}  // namespace ctc
