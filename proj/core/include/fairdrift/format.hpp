#pragma once

// Number formatting shared by every CSV and JSON writer. 17 significant
// digits round-trip any binary64 value exactly through strtod, which is what
// makes exported artifacts bit-stable.

#include <cstdio>
#include <string>

namespace fairdrift {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace fairdrift
