#include "mulde/error.hpp"

namespace mulde {

const char* category_tag(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kUsage: return "usage";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kFormat: return "format";
    case ErrorCategory::kShape: return "dimension-mismatch";
    case ErrorCategory::kNumeric: return "numeric";
  }
  return "unknown";
}

}  // namespace mulde
