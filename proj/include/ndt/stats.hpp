#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "ndt/error.hpp"

namespace ndt::stats {

/// Index of the p-th percentile (p in [0,100]) in a sorted sample of size n: the rank
/// nearest to p/100 * (n - 1), halves rounded up.
inline std::size_t nearest_rank_index(std::size_t n, double p) {
    require(n > 0, "percentile of empty sample");
    require(p >= 0.0 && p <= 100.0, "percentile outside [0,100]");
    const double pos = p / 100.0 * static_cast<double>(n - 1);
    const auto idx = static_cast<std::size_t>(std::round(pos));
    return std::min(idx, n - 1);
}

inline double percentile_sorted(std::span<const double> sorted, double p) {
    return sorted[nearest_rank_index(sorted.size(), p)];
}

inline double percentile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    return percentile_sorted(values, p);
}

inline double mean(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

/// Lower median for even sizes is not used; the midpoint average is.
inline double median(std::vector<double> values) {
    require(!values.empty(), "median of empty sample");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

inline double variance(std::span<const double> values) {
    if (values.size() < 2) return 0.0;
    const double m = mean(values);
    double acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    return acc / static_cast<double>(values.size());
}

inline int signum(double value, double tie = 0.0) noexcept {
    if (std::abs(value) < tie) return 0;
    if (value > 0.0) return 1;
    if (value < 0.0) return -1;
    return 0;
}

}  // namespace ndt::stats
