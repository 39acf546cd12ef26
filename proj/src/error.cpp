#include "ccm/error.hpp"

namespace ccm {

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return 2;
    case ErrorKind::io: return 3;
    case ErrorKind::format: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::shape: return 5;
  }
  return 1;
}

}  // namespace ccm
