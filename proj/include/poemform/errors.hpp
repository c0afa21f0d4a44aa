#pragma once

#include <stdexcept>
#include <string>

namespace poemform {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, invariant violations, unknown names.
// The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A record in a line-oriented file could not be accepted.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& source, std::size_t line, const std::string& field,
              const std::string& what)
      : ValidationError(source + ":" + std::to_string(line) + ": field '" + field + "': " + what),
        line_(line),
        field_(field) {}

  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// Failures while running a computation (non-finite values, I/O failures).
// The CLI maps these to exit code 2.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace poemform
