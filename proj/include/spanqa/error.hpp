#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spanqa {

enum class ErrorKind {
  kShape,
  kConfig,
  kRange,
  kNumeric,
  kParse,
  kFormat,
  kIo,
  kMismatch,
};

std::string_view error_kind_name(ErrorKind kind);

// Single exception type for the library. `kind` is what the CLI reports in
// its machine-readable error line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace spanqa
