#pragma once

#include <stdexcept>
#include <string>

namespace distaudit {

// Base class for all toolkit errors. Subclasses pick the failure domain;
// the CLI maps ConfigError to exit code 1 and everything else to 2.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct VocabError : Error {
  using Error::Error;
};

struct LengthError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct IntegrityError : Error {
  using Error::Error;
};

}  // namespace distaudit
