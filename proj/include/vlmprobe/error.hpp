#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vlmprobe {

enum class ErrorKind {
  InvalidArgument,  // malformed input shapes, values, or flags
  Precondition,     // well-formed input on which the measurement is undefined
  Format,           // on-disk data that fails validation
  Io,
};

std::string_view to_string(ErrorKind kind);

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

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace vlmprobe
