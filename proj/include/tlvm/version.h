#pragma once

#include <string_view>

namespace tlvm {

// git-describe string captured at configure time.
std::string_view version();

}  // namespace tlvm
