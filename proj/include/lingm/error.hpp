#pragma once

#include <stdexcept>
#include <string>

namespace lingm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed NDT / PPM / manifest content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A vectorized classifier gradient with zero norm; the cosine is undefined.
class DegenerateGradient : public Error {
 public:
  using Error::Error;
};

}  // namespace lingm
