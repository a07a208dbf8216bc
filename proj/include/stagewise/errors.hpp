#pragma once

#include <stdexcept>
#include <string>

namespace stagewise {

// User-facing failures map to exit code 2; anything else escaping a command
// is an internal failure (exit code 1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool user_error() const { return true; }
};

// Missing or empty inputs, duplicate ids, incompatible files.
class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed records. `line` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

class AffinityError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

// A request the solver cannot honour at this size (e.g. exact search above the guard).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
  bool user_error() const override { return false; }
};

}  // namespace stagewise
