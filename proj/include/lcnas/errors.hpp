#pragma once

#include <stdexcept>
#include <string>

namespace lcnas {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArchitecture : public Error {
 public:
  using Error::Error;
};

class InvalidEncoding : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input file / configuration value.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class DegenerateDataset : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace lcnas
