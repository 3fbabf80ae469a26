#pragma once
// Error type shared across the library. The kind maps onto distinct CLI exit
// codes, so every throw site picks the kind deliberately.

#include <stdexcept>
#include <string>

namespace glyrag {

enum class ErrorKind {
  io = 2,                // unreadable/unwritable file
  parse = 3,             // malformed CSV/JSON/binary content
  validation = 4,        // bad shapes, bad arguments, contract violations
  missing_artifact = 5,  // a pipeline stage ran before its inputs exist
  hash_mismatch = 6,     // artifacts from different runs/configs combined
  config = 7,            // malformed or inconsistent run configuration
  remote = 8,            // remote backend failed and fallback was disabled
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::validation: return "validation";
    case ErrorKind::missing_artifact: return "missing_artifact";
    case ErrorKind::hash_mismatch: return "hash_mismatch";
    case ErrorKind::config: return "config";
    case ErrorKind::remote: return "remote";
  }
  return "unknown";
}

}  // namespace glyrag
