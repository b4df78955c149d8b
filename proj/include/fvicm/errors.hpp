#pragma once

#include <stdexcept>
#include <string>

namespace fvicm {

enum class ErrorKind { input, config, numerical, convergence };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input: return "input";
    case ErrorKind::config: return "config";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::convergence: return "convergence";
  }
  return "unknown";
}

// Base for everything this library throws. The kind drives the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

// Weight matrix or information matrix too ill-conditioned to invert.
struct ConditioningError : Error {
  explicit ConditioningError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

struct ConvergenceError : Error {
  explicit ConvergenceError(const std::string& what) : Error(ErrorKind::convergence, what) {}
};

}  // namespace fvicm
