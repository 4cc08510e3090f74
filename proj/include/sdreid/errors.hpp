#pragma once

#include <stdexcept>
#include <string>

namespace sdreid {

// Exit codes of the command line tool map onto these error kinds.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or incompatible on-disk container.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace sdreid
