#pragma once

#include "tisc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace tisc {

/// n points spaced evenly on [a, b] (both ends included).
inline std::vector<double> uniform_grid(double a, double b, std::size_t n) {
    if (n < 2) throw InsufficientDataError("uniform_grid: n >= 2 required");
    std::vector<double> g(n);
    const double h = (b - a) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) g[i] = a + h * static_cast<double>(i);
    g.back() = b;
    return g;
}

/// n points with geometrically growing spacing on [a, b], a > 0.
inline std::vector<double> geometric_grid(double a, double b, std::size_t n) {
    if (n < 2) throw InsufficientDataError("geometric_grid: n >= 2 required");
    if (!(a > 0.0 && b > a)) throw DomainError("geometric_grid: need 0 < a < b");
    std::vector<double> g(n);
    const double r = std::log(b / a) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) g[i] = a * std::exp(r * static_cast<double>(i));
    g.front() = a;
    g.back() = b;
    return g;
}

/// n points inside the open interval (lo, hi) kept `guard` away from both ends:
/// geometric on the lower half (relative to lo), uniform on the upper half.
inline std::vector<double> composite_grid(double lo, double hi, std::size_t n, double guard = 1e-8) {
    if (n < 4) throw InsufficientDataError("composite_grid: n >= 4 required");
    if (!(hi - lo > 4.0 * guard)) throw DomainError("composite_grid: interval narrower than the guard band");
    const double w = hi - lo;
    const double mid = lo + 0.5 * w;
    const std::size_t ng = n / 2;
    const double first = std::max(guard, 1e-6 * w);
    auto g = geometric_grid(first, mid - lo, ng + 1);
    g.pop_back();
    for (double& x : g) x += lo;
    auto u = uniform_grid(mid, hi - guard, n - ng);
    g.insert(g.end(), u.begin(), u.end());
    return g;
}

/// Removes grid points within `band` of any of `points`.
inline std::vector<double> exclude_near(std::span<const double> grid, std::span<const double> points, double band) {
    std::vector<double> out;
    out.reserve(grid.size());
    for (double x : grid) {
        bool keep = true;
        for (double p : points)
            if (std::abs(x - p) < band) keep = false;
        if (keep) out.push_back(x);
    }
    return out;
}

}  // namespace tisc
