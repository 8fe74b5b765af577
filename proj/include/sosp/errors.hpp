#pragma once

#include <stdexcept>
#include <string>

namespace sosp {

// Error categories map 1:1 onto CLI exit codes and onto the "category"
// field of the machine-readable error report printed on stderr.
enum class ErrorCategory {
  config = 2,       // bad or inconsistent configuration
  io = 3,           // file missing / unreadable / malformed container
  input = 4,        // bad runtime argument (label range, N' > N, ...)
  dimension = 5,    // shape mismatch inside the layer graph
  structure = 6,    // index out of range / structural incompatibility
  unsupported = 7,  // operation not defined for this model family
  internal = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, std::string msg)
      : std::runtime_error(std::move(msg)), category_(cat) {}
  ErrorCategory category() const { return category_; }
  int exit_code() const { return static_cast<int>(category_); }
  const char* category_name() const {
    switch (category_) {
      case ErrorCategory::config: return "config";
      case ErrorCategory::io: return "io";
      case ErrorCategory::input: return "input";
      case ErrorCategory::dimension: return "dimension";
      case ErrorCategory::structure: return "structure";
      case ErrorCategory::unsupported: return "unsupported";
      case ErrorCategory::internal: return "internal";
    }
    return "internal";
  }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) {
  throw Error(cat, msg);
}

inline void require(bool cond, ErrorCategory cat, const std::string& msg) {
  if (!cond) fail(cat, msg);
}

}  // namespace sosp
