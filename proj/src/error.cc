#include "mmb/error.h"

namespace mmb {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIntegrity: return "integrity";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kArity: return "arity";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kDomain: return "domain";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kArgument: return "argument";
    case ErrorKind::kPath: return "path";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace mmb
