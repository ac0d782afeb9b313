#pragma once

#include <string>

#ifndef MPATCH_BUILD_ID
#define MPATCH_BUILD_ID "unknown"
#endif

namespace mpatch {

inline std::string build_id() { return MPATCH_BUILD_ID; }

}  // namespace mpatch
