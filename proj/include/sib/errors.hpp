#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sib {

// Precondition violated by the caller (wrong shapes, bad indices, n < 2, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shape mismatch inside a primitive; the message names the primitive and dims.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Argument outside the mathematical domain of an operation (e.g. tau <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid configuration value or unsupported setting.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed byte stream or file; carries the byte offset of the failure.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Missing or unreadable file, or a dataset folder that breaks the layout.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A training or evaluation quantity became NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sib
