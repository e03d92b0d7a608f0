#pragma once

#include "tisc/errors.hpp"
#include "tisc/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tisc {

/// Which one-sided piece to evaluate at a pasting point.
enum class Side { Left, Right };

/// Positive root of sigma2/2 * g(g-1) = q.
inline double gamma(double q, double sigma2) {
    if (!(q > 0.0) || !(sigma2 > 0.0)) throw DomainError("gamma: q and sigma2 must be > 0");
    return 0.5 * (1.0 + std::sqrt(1.0 + 8.0 * q / sigma2));
}

/// GBM case parameters must satisfy q2 > q1 > sigma2 > 0.
inline void check_gbm_case_parameters(double sigma2, double q1, double q2) {
    if (!(sigma2 > 0.0 && q1 > sigma2 && q2 > q1) || !std::isfinite(q2))
        throw ParameterError("parameters violate the standing assumption q2 > q1 > sigma2 > 0 (got sigma2=" +
                             std::to_string(sigma2) + ", q1=" + std::to_string(q1) + ", q2=" + std::to_string(q2) +
                             ")");
}

/// Two-atom (p = 1/2 each) strong-threshold candidate for f = x^2/2, mu = 0, sigma(x) = sigma x.
/// On (0, b): v_i = A_i x^gamma_i + x^2 / (2 (q_i - sigma2)); on [b, inf): v_i(b) + x - b.
struct StrongCandidate {
    double sigma2 = 0, q1 = 0, q2 = 0;
    double gamma1 = 0, gamma2 = 0;
    double A1 = 0, A2 = 0;
    double b_star = 0;

    double q(int i) const { return i == 0 ? q1 : q2; }
    double g(int i) const { return i == 0 ? gamma1 : gamma2; }
    double A(int i) const { return i == 0 ? A1 : A2; }
};

/// Candidate with an arbitrary threshold b; A_i chosen so v'(b; q_i) = 1.
inline StrongCandidate strong_with_threshold(double sigma2, double q1, double q2, double b) {
    check_gbm_case_parameters(sigma2, q1, q2);
    if (!(b > 0.0)) throw DomainError("strong_with_threshold: b must be > 0");
    StrongCandidate c;
    c.sigma2 = sigma2;
    c.q1 = q1;
    c.q2 = q2;
    c.gamma1 = gamma(q1, sigma2);
    c.gamma2 = gamma(q2, sigma2);
    c.b_star = b;
    auto coef = [&](double q, double g) { return (1.0 - b / (q - sigma2)) / g * std::exp((1.0 - g) * std::log(b)); };
    c.A1 = coef(q1, c.gamma1);
    c.A2 = coef(q2, c.gamma2);
    return c;
}

/// Threshold b* at which the aggregate second derivative vanishes from the left.
inline double strong_threshold(double sigma2, double q1, double q2) {
    check_gbm_case_parameters(sigma2, q1, q2);
    const double g1 = gamma(q1, sigma2), g2 = gamma(q2, sigma2);
    const double d1 = q1 - sigma2, d2 = q2 - sigma2;
    return (g1 + g2 - 2.0) * d1 * d2 / ((g1 - 2.0) * d2 + (g2 - 2.0) * d1);
}

inline StrongCandidate build_strong(double sigma2, double q1, double q2) {
    return strong_with_threshold(sigma2, q1, q2, strong_threshold(sigma2, q1, q2));
}

/// d^order/dx^order v(x; q_i), order 0..3, atom index i in {0, 1}.
/// At x == b* the affine piece is used unless side == Left.
inline double v_strong_eval(const StrongCandidate& c, double x, int i, int order, Side side = Side::Right) {
    if (!(x > 0.0)) throw DomainError("v_strong_eval: x must be > 0");
    if (i != 0 && i != 1) throw DomainError("v_strong_eval: atom index must be 0 or 1");
    if (order < 0 || order > 3) throw DomainError("v_strong_eval: order must be 0..3");
    const double b = c.b_star;
    const double A = c.A(i), g = c.g(i), d = c.q(i) - c.sigma2;
    auto left = [&](double y, int k) {
        const double ly = std::log(y);
        switch (k) {
            case 0: return A * std::exp(g * ly) + 0.5 * y * y / d;
            case 1: return A * g * std::exp((g - 1.0) * ly) + y / d;
            case 2: return A * g * (g - 1.0) * std::exp((g - 2.0) * ly) + 1.0 / d;
            default: return A * g * (g - 1.0) * (g - 2.0) * std::exp((g - 3.0) * ly);
        }
    };
    if (x < b || (x == b && side == Side::Left)) return left(x, order);
    switch (order) {
        case 0: return left(b, 0) + (x - b);
        case 1: return 1.0;
        default: return 0.0;
    }
}

/// Aggregate V = (v_0 + v_1) / 2.
inline double V_strong_eval(const StrongCandidate& c, double x, int order, Side side = Side::Right) {
    return 0.5 * (v_strong_eval(c, x, 0, order, side) + v_strong_eval(c, x, 1, order, side));
}

/// H = q1 + q2 - 2 b*; its sign is the sign of V'''(b*-).
inline double regime_indicator(double sigma2, double q1, double q2) {
    return q1 + q2 - 2.0 * strong_threshold(sigma2, q1, q2);
}

/// Grid maximum of V' - 1 over (0, b) on an n-point composite grid with a 1e-8 guard at both ends.
inline double strong_condition_I_margin(const StrongCandidate& c, std::size_t n = 10000) {
    double worst = -std::numeric_limits<double>::infinity();
    for (double x : composite_grid(0.0, c.b_star, n)) worst = std::max(worst, V_strong_eval(c, x, 1) - 1.0);
    return worst;
}

struct RegimeBracket {
    bool found = false;
    double q2_pass = 0;  ///< largest q2 seen where the grid condition holds
    double q2_fail = 0;  ///< smallest q2 seen where it fails
    int iterations = 0;
};

/// Bisection on q2 for the sign change of the grid-checked condition V' <= 1 + tol on (0, b*).
/// Requires the condition to hold at q2_lo and fail at q2_hi; otherwise found == false.
/// Reports an empirical crossover only; the dichotomy need not be sharp.
inline RegimeBracket strong_regime_crossover(double sigma2, double q1, double q2_lo, double q2_hi,
                                             std::size_t n = 10000, double tol = 1e-9, double width = 1e-6) {
    auto passes = [&](double q2) { return strong_condition_I_margin(build_strong(sigma2, q1, q2), n) <= tol; };
    RegimeBracket r;
    if (!passes(q2_lo) || passes(q2_hi)) return r;
    double lo = q2_lo, hi = q2_hi;
    while (hi - lo > width && r.iterations < 200) {
        const double mid = 0.5 * (lo + hi);
        (passes(mid) ? lo : hi) = mid;
        ++r.iterations;
    }
    r.found = true;
    r.q2_pass = lo;
    r.q2_fail = hi;
    return r;
}

}  // namespace tisc
