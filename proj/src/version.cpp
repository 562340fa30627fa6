#include "tlvm/version.h"

#ifndef TLVM_VERSION_STRING
#define TLVM_VERSION_STRING "unknown"
#endif

namespace tlvm {

std::string_view version() { return TLVM_VERSION_STRING; }

}  // namespace tlvm
