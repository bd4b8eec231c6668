#pragma once

#include <stdexcept>
#include <string>

namespace recap {

/// Error categories double as CLI exit codes.
enum class ErrorKind : int {
  validation = 2,
  numerical = 3,
  external_service = 4,
  internal = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

/// Malformed or corrupted file contents (bad magic, CRC mismatch, truncation).
class FormatError : public ValidationError {
 public:
  explicit FormatError(const std::string& what) : ValidationError(what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

class ExternalServiceError : public Error {
 public:
  explicit ExternalServiceError(const std::string& what) : Error(ErrorKind::external_service, what) {}
};

class InternalError : public Error {
 public:
  explicit InternalError(const std::string& what) : Error(ErrorKind::internal, what) {}
};

/// Rethrows `e` with `label` prepended, preserving its category.
[[noreturn]] inline void rethrow_labeled(const Error& e, const std::string& label) {
  const std::string msg = label + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::validation:
      if (dynamic_cast<const FormatError*>(&e) != nullptr) throw FormatError(msg);
      throw ValidationError(msg);
    case ErrorKind::numerical:
      throw NumericalError(msg);
    case ErrorKind::external_service:
      throw ExternalServiceError(msg);
    case ErrorKind::internal:
      break;
  }
  throw InternalError(msg);
}

/// Runs `fn`, labeling any recap::Error it throws with a stage name.
template <typename Fn>
decltype(auto) with_stage(const char* stage, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    rethrow_labeled(e, std::string("[") + stage + "]");
  }
}

}  // namespace recap
