#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mortshock {

// Input/contract violations (bad files, infeasible configs, broken
// preconditions). The CLI maps these to exit code 1.
class validation_error : public std::runtime_error {
public:
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures (divergence, overflow, singular systems). Exit code 2.
class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Closed integer interval used for both age and year axes.
struct closed_range {
    int lo = 0;
    int hi = 0;

    int count() const { return hi - lo + 1; }
    bool contains(int v) const { return v >= lo && v <= hi; }
    int index(int v) const { return v - lo; }
    int at(int idx) const { return lo + idx; }
    bool operator==(const closed_range&) const = default;
};

using age_range = closed_range;
using year_range = closed_range;

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw validation_error(msg);
}

// Deterministic 64-bit mix used to derive per-path RNG seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::vector<double> log_spaced(double lo, double hi, int n) {
    std::vector<double> out(static_cast<std::size_t>(n));
    const double a = std::log(lo), b = std::log(hi);
    for (int i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] =
            std::exp(a + (b - a) * (n == 1 ? 0.0 : double(i) / double(n - 1)));
    return out;
}

inline double logsumexp3(double a, double b, double c) {
    const double m = std::max(a, std::max(b, c));
    if (!std::isfinite(m)) return m;  // all -inf (or a nan propagates)
    return m + std::log(std::exp(a - m) + std::exp(b - m) + std::exp(c - m));
}

}  // namespace mortshock
