#pragma once

#include <stdexcept>
#include <string>

namespace ccm {

/// Failure category. The CLI maps each category onto a fixed exit code.
enum class ErrorKind {
  invalid_argument,  // bad parameters or flags
  io,                // file missing, unreadable, unwritable
  format,            // file present but malformed (bad magic, truncated)
  shape,             // dimension mismatch between operands
  numeric,           // non-finite values, singular systems
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Exit codes used by the command-line tool.
int exit_code_for(ErrorKind kind) noexcept;

}  // namespace ccm
