#pragma once

#include <stdexcept>

namespace embae {

// Base class of all errors thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A violated precondition (shape mismatch, missing positive/negative, ...).
struct ContractError : Error {
  using Error::Error;
};

// An invalid or inconsistent configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// A file could not be read, written, or parsed.
struct IoError : Error {
  using Error::Error;
};

}  // namespace embae
