#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gplvm {

enum class ErrorKind {
  dimension_mismatch,
  non_finite,
  ill_conditioned,
  configuration,
  parse,
  io,
  unsupported,
  out_of_range,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::dimension_mismatch:
    return "dimension mismatch";
  case ErrorKind::non_finite:
    return "non-finite value";
  case ErrorKind::ill_conditioned:
    return "ill-conditioned matrix";
  case ErrorKind::configuration:
    return "configuration error";
  case ErrorKind::parse:
    return "parse error";
  case ErrorKind::io:
    return "io error";
  case ErrorKind::unsupported:
    return "unsupported operation";
  case ErrorKind::out_of_range:
    return "out of range";
  }
  return "error";
}

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit-code mapping) can tell user errors from numerical breakdowns.
class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string &message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

/// Side channel for recoverable oddities (dropped rows, jitter on S, ...).
struct Warnings {
  std::vector<std::string> messages;

  void add(std::string message) { messages.push_back(std::move(message)); }
  bool empty() const { return messages.empty(); }
};

inline void warn(Warnings *sink, std::string message) {
  if (sink != nullptr) {
    sink->add(std::move(message));
  }
}

inline void require(bool condition, ErrorKind kind, const std::string &message) {
  if (!condition) {
    throw Error(kind, message);
  }
}

} // namespace gplvm
