#pragma once

#include <stdexcept>
#include <string>

namespace varegress {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared in a computed value.
class NumericError : public Error {
 public:
  using Error::Error;
};

class FactorizationError : public Error {
 public:
  FactorizationError(const std::string& what, double jitter)
      : Error(what + " (jitter " + std::to_string(jitter) + ")"), jitter_(jitter) {}

  double jitter() const noexcept { return jitter_; }

 private:
  double jitter_;
};

// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  FormatError(const std::string& file, const std::string& what)
      : Error(file + ": " + what), file_(file) {}

  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace varegress
