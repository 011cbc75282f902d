#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace reidforge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain (bad hyperparameter, label out of range...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A computation produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kNonFinite,
  kInvalidHeader,
  kIo,
};

class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

/// Manifest or config parse failure; line is 1-based, 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace reidforge
