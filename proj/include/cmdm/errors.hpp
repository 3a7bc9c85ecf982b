#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmdm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters or inconsistent configuration (bad head count, odd rope dim, unknown key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a degenerate numeric case (zero-norm row, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Input violates an operation precondition (sequence too short, level out of range, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container; carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cmdm
