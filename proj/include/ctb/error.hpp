#pragma once

#include <stdexcept>
#include <string>

namespace ctb {

// Every failure raised by the library derives from Error; the C API maps the
// concrete type onto a status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation called outside its mathematical domain (root cube without a
// parent, inrdist with J outside 3I, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A testing function whose dyadic average is (numerically) zero on some cube.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A checked identity or precondition that failed at run time.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctb
