#pragma once

#include <stdexcept>
#include <string>

namespace xfernas {

// Base for every recoverable failure raised by the library. The CLI turns any
// of these into a one-line diagnostic and a nonzero exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed genome JSON, history lines, checkpoints and token sequences.
class FormatError : public Error {
 public:
  using Error::Error;
};

class RegistryError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class SearchError : public Error {
 public:
  using Error::Error;
};

// Broken preconditions that indicate a programming error (shape mismatch,
// non-scalar loss, out-of-vocabulary token fed to the network).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace xfernas
