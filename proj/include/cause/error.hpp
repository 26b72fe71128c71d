#pragma once

#include <stdexcept>
#include <string>

namespace cause {

/// Broad failure categories. The CLI maps them onto exit codes 2/3/4.
enum class ErrorKind { Validation, Io, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string& what) { return {ErrorKind::Validation, what}; }
inline Error io_error(const std::string& what) { return {ErrorKind::Io, what}; }
inline Error numeric_error(const std::string& what) { return {ErrorKind::Numeric, what}; }

}  // namespace cause
