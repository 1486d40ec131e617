#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dsqil {

/// Shapes or dimensions of two operands disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric input (gradient, Q value, ...) is NaN or infinite.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A precondition of an operation does not hold (empty buffer, bad config, ...).
class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed dataset, checkpoint or config file. `record()` is the
/// zero-based record index (line number minus one for line formats).
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t record, const std::string& what)
      : std::runtime_error("record " + std::to_string(record) + ": " + what), record_(record) {}

  std::size_t record() const noexcept { return record_; }

 private:
  std::size_t record_;
};

}  // namespace dsqil
