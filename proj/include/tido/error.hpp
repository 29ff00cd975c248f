#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tido {

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when an object is used in a state that does not support the call,
// e.g. a stale forward cache or an empty prototype set.
struct InvalidState : std::logic_error {
  using std::logic_error::logic_error;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line_no)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + what),
        line(line_no) {}
  std::size_t line;
};

}  // namespace tido
