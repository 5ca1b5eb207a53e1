#pragma once

#include <stdexcept>
#include <string>

namespace spotkit {

/// Machine-readable category of a failure; the CLI maps each to an exit code.
enum class ErrorKind {
  invalid_argument,
  shape,
  config,
  missing_file,
  format,
  version_mismatch,
  data,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::missing_file: return "missing_file";
    case ErrorKind::format: return "format";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace spotkit
