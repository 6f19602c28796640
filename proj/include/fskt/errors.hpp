#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fskt {

// Base class for every error raised by the library. The CLI maps the
// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a tensor, a degenerate normalization, a diverging loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Malformed input text (embedding files, annotations, configs, checkpoints).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  explicit ParseError(const std::string& what) : ParseError(what, 0) {}

  // 1-based line number, or 0 when the error is not tied to a line.
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A requested key (token, category, parameter) that does not exist.
class LookupError : public Error {
 public:
  using Error::Error;
};

// Input that parsed but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad configuration values or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File system failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fskt
