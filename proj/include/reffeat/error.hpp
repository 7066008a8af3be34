#pragma once

#include <stdexcept>
#include <string>

namespace reffeat {

// Base of every exception thrown by the library. The CLI maps the
// subclasses onto exit codes (config -> 1, data -> 2, invariant -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable, truncated or malformed files.
class DataError : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

// RANSAC could not find a model with at least four inliers.
class NoModelError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace reffeat
