#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ldsim {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Raised when two sizes that must agree do not.
class DimensionMismatch : public Error {
 public:
  DimensionMismatch(std::string what, std::size_t expected, std::size_t actual)
      : Error(what + ": expected size " + std::to_string(expected) +
              ", got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

// Raised when parameter vectors built for different network layouts meet.
class LayoutMismatch : public Error {
 public:
  using Error::Error;
};

// An aggregation rule was called with too few updates.
class ArityError : public Error {
 public:
  ArityError(std::string rule, std::size_t required, std::size_t actual)
      : Error("aggregation rule '" + rule + "' requires at least " +
              std::to_string(required) + " updates, got " +
              std::to_string(actual)),
        rule_(std::move(rule)),
        required_(required) {}

  const std::string& rule() const noexcept { return rule_; }
  std::size_t required() const noexcept { return required_; }

 private:
  std::string rule_;
  std::size_t required_;
};

}  // namespace ldsim
