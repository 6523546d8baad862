#pragma once

#include <stdexcept>
#include <string>

namespace bidet {

enum class ErrorCode {
  invalid_argument = 1,
  shape_mismatch,
  io,
  format,
  version_mismatch,
  numeric,
  mode_mismatch,
  internal,
};

const char* error_code_name(ErrorCode code) noexcept;

// Every failure raised by the library carries a code so the C boundary can
// map it to a status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}
inline void require(bool cond, ErrorCode code, const char* what) {
  if (!cond) fail(code, what);
}

// Incidents that do not abort (skipped steps, label collisions) go here.
void log_incident(const std::string& msg);
void set_incident_logging(bool enabled);

}  // namespace bidet
