#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

namespace cliptune {

// Shortest decimal string that parses back to exactly the same double.
// Deterministic, so logs and CSVs are byte-stable across reruns.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

}  // namespace cliptune
