#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace killchain {

enum class ErrorKind {
  Parse,        // malformed input document
  Format,       // well-formed document violating a file schema
  Validation,   // interchange data failing a numeric/coverage check
  Contract,     // caller broke an operation's precondition
  Degenerate,   // zero vectors, single-label training and similar
  Config,       // invalid configuration value
  Lookup,       // missing key
  Divergence,   // optimizer produced non-finite values
  EmptyInput,
  Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace killchain
