#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmb {

enum class ErrorKind {
  kFormat,      // unparseable input
  kIntegrity,   // duplicate keys, missing records, misaligned inputs
  kValidation,  // values outside their invariant (NaN log-prob, zero vector)
  kDimension,   // ragged embedding rows
  kArity,       // too few entries
  kCapacity,    // not enough samples for the request
  kDomain,      // argument outside the mathematical domain
  kShape,       // matrix shapes disagree
  kArgument,    // missing or contradictory arguments
  kPath,        // file not found / not writable
  kConfig,      // bad run configuration
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message),
        kind_(kind),
        detail_(message) {}

  ErrorKind kind() const { return kind_; }
  // The message without the "<kind> error: " prefix.
  const std::string& detail() const { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace mmb
