#pragma once

#include <cmath>
#include <limits>

namespace mlmlab {

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double logaddexp(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    double m = a > b ? a : b;
    return m + std::log1p(std::exp((a < b ? a : b) - m));
}

}  // namespace mlmlab
