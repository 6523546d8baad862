#include "error.hpp"

#include <atomic>
#include <iostream>

namespace bidet {

namespace {
std::atomic<bool> g_log_incidents{true};
}

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "INVALID_ARGUMENT";
    case ErrorCode::shape_mismatch: return "SHAPE_MISMATCH";
    case ErrorCode::io: return "IO";
    case ErrorCode::format: return "FORMAT";
    case ErrorCode::version_mismatch: return "VERSION_MISMATCH";
    case ErrorCode::numeric: return "NUMERIC";
    case ErrorCode::mode_mismatch: return "MODE_MISMATCH";
    case ErrorCode::internal: return "INTERNAL";
  }
  return "UNKNOWN";
}

void log_incident(const std::string& msg) {
  if (g_log_incidents.load(std::memory_order_relaxed)) std::clog << "[bidet] " << msg << '\n';
}

void set_incident_logging(bool enabled) { g_log_incidents.store(enabled, std::memory_order_relaxed); }

}  // namespace bidet
