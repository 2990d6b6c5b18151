#pragma once

#include <algorithm>
#include <random>

namespace pfdetr {

/// Temporal segment; normalized to [0,1] inside the model, seconds outside it.
struct Interval {
    double start = 0.0;
    double end = 0.0;

    double length() const { return end - start; }
    double center() const { return 0.5 * (start + end); }
    friend bool operator==(const Interval&, const Interval&) = default;
};

inline double intersection(const Interval& a, const Interval& b) {
    return std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
}

/// Temporal IoU with the union floored at 1e-8.
inline double tiou(const Interval& a, const Interval& b) {
    const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
    return intersection(a, b) / std::max(uni, 1e-8);
}

/// Uniform double in [0, 1) from the top 53 bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace pfdetr
