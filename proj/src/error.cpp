#include "fsens/error.hpp"

namespace fsens {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::schema: return "schema";
    case ErrorKind::validation: return "validation";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::split_infeasible: return "split_infeasible";
    case ErrorKind::render: return "render";
    case ErrorKind::io: return "io";
    case ErrorKind::insufficient_data: return "insufficient_data";
    case ErrorKind::infeasible_shift: return "infeasible_shift";
    case ErrorKind::transport: return "transport";
    case ErrorKind::capability: return "capability";
    case ErrorKind::shape: return "shape";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::pairing: return "pairing";
    case ErrorKind::coverage: return "coverage";
    case ErrorKind::undefined: return "undefined";
  }
  return "unknown";
}

}  // namespace fsens
