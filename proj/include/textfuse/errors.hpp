// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace textfuse {

// Shapes of two operands are incompatible.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VersionError : FormatError {
  using FormatError::FormatError;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what), line_number(line) {}
  std::size_t line_number;
};

// Training hit a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace textfuse
