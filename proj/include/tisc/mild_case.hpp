#pragma once

#include "tisc/errors.hpp"
#include "tisc/model.hpp"
#include "tisc/strong_case.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

namespace tisc {

/// Two-atom (p = 1/2 each) mild-threshold candidate for f = x^2/2, mu = 0, sigma(x) = sigma x.
/// v_i = A_i x^gamma_i + x^2/(2(q_i - sigma2)) on (0, b_low),
///       a_i x^2/2 + b_i x + c_i               on [b_low, beta_star),
///       v_i(beta_star-) + x - beta_star       on [beta_star, inf).
struct MildCandidate {
    double sigma2 = 0, q1 = 0, q2 = 0;
    double gamma1 = 0, gamma2 = 0;
    double a1 = 0, a2 = 0, b1 = 0, b2 = 0, c1 = 0, c2 = 0;
    double A1 = 0, A2 = 0;
    double b_low = 0;
    double beta_star = 0;
    /// Value returned by the rate within `cap_band` of beta_star.
    double rate_cap = 1e15;
    double cap_band = 1e-12;

    double q(int i) const { return i == 0 ? q1 : q2; }
    double g(int i) const { return i == 0 ? gamma1 : gamma2; }
    double a(int i) const { return i == 0 ? a1 : a2; }
    double b(int i) const { return i == 0 ? b1 : b2; }
    double c(int i) const { return i == 0 ? c1 : c2; }
    double A(int i) const { return i == 0 ? A1 : A2; }
};

struct MildBuild {
    MildCandidate candidate;
    bool valid = false;
    /// Empty when valid.
    std::string reason;
};

/// Constants are always filled (A_i and c_i are NaN when b_low <= 0); validity requires 0 < b_low < beta_star.
inline MildBuild build_mild(double sigma2, double q1, double q2) {
    check_gbm_case_parameters(sigma2, q1, q2);
    MildCandidate m;
    m.sigma2 = sigma2;
    m.q1 = q1;
    m.q2 = q2;
    m.gamma1 = gamma(q1, sigma2);
    m.gamma2 = gamma(q2, sigma2);
    const double gap = q2 - q1;
    m.a1 = -2.0 / gap;
    m.a2 = 2.0 / gap;
    m.b1 = 2.0 * q2 / gap;
    m.b2 = -2.0 * q1 / gap;
    const double g1 = m.gamma1, g2 = m.gamma2;
    const double k1 = m.a1 - 1.0 / (q1 - sigma2), k2 = m.a2 - 1.0 / (q2 - sigma2);
    m.b_low = ((g1 - 1.0) * m.b1 + (g2 - 1.0) * m.b2) / ((2.0 - g1) * k1 + (2.0 - g2) * k2);
    m.beta_star = 0.5 * (q1 + q2);

    const double bl = m.b_low;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (bl > 0.0 && std::isfinite(bl)) {
        for (int i = 0; i < 2; ++i) {
            const double qi = m.q(i), ai = m.a(i), bi = m.b(i), gi = m.g(i);
            const double sgn = i == 0 ? -1.0 : 1.0;  // (-1)^(i+1) for 1-based atom labels
            const double Ai = (ai * bl - bl / (qi - sigma2) + bi) / gi * std::exp((1.0 - gi) * std::log(bl));
            const double ci = (0.5 * bl * bl * (1.0 + (sigma2 - qi) * ai - sgn * sigma2 * (g1 - 2.0) * k1) -
                               bl * (sgn * 0.5 * sigma2 * (g1 - 1.0) * m.b1 + qi * bi)) /
                              qi;
            (i == 0 ? m.A1 : m.A2) = Ai;
            (i == 0 ? m.c1 : m.c2) = ci;
        }
    } else {
        m.A1 = m.A2 = m.c1 = m.c2 = nan;
    }

    MildBuild out{m, true, {}};
    if (!std::isfinite(bl)) {
        out.valid = false;
        out.reason = "b_low is not finite";
    } else if (!(bl > 0.0)) {
        out.valid = false;
        out.reason = "b_low <= 0";
    } else if (!(bl < m.beta_star)) {
        out.valid = false;
        out.reason = "b_low >= beta_star";
    }
    return out;
}

/// Rate u* as a RateFunction: zero below b_low, rational on [b_low, beta_star).
inline RateFunction mild_rate(const MildCandidate& m) {
    RationalRate r;
    r.p2 = 0.5 * (1.0 + (m.sigma2 - m.q1) * m.a1);
    r.p1 = -m.q1 * m.b1;
    r.p0 = -m.q1 * m.c1;
    r.d1 = m.a1;
    r.d0 = m.b1 - 1.0;
    r.start = m.b_low;
    r.pole = m.beta_star;
    r.cap = m.rate_cap;
    r.cap_band = m.cap_band;
    return RateFunction::rational(r);
}

inline double u_star_eval(const MildCandidate& m, double x) {
    if (!(x > 0.0) || !(x < m.beta_star)) throw DomainError("u_star_eval: x must lie in (0, beta_star)");
    if (x < m.b_low) return 0.0;
    if (x >= m.beta_star - m.cap_band) return m.rate_cap;
    const double num = (0.5 * (1.0 + (m.sigma2 - m.q1) * m.a1) * x - m.q1 * m.b1) * x - m.q1 * m.c1;
    const double den = m.a1 * x + m.b1 - 1.0;
    return std::min(num / den, m.rate_cap);
}

/// d^order/dx^order v(x; q_i), order 0..2. At b_low and beta_star the right piece is used unless side == Left.
inline double v_mild_eval(const MildCandidate& m, double x, int i, int order, Side side = Side::Right) {
    if (!(x > 0.0)) throw DomainError("v_mild_eval: x must be > 0");
    if (i != 0 && i != 1) throw DomainError("v_mild_eval: atom index must be 0 or 1");
    if (order < 0 || order > 2) throw DomainError("v_mild_eval: order must be 0..2");
    const double A = m.A(i), g = m.g(i), d = m.q(i) - m.sigma2;
    const double a = m.a(i), b = m.b(i), c = m.c(i);
    auto waiting = [&](double y) {
        const double ly = std::log(y);
        switch (order) {
            case 0: return A * std::exp(g * ly) + 0.5 * y * y / d;
            case 1: return A * g * std::exp((g - 1.0) * ly) + y / d;
            default: return A * g * (g - 1.0) * std::exp((g - 2.0) * ly) + 1.0 / d;
        }
    };
    auto quad = [&](double y, int k) {
        switch (k) {
            case 0: return (0.5 * a * y + b) * y + c;
            case 1: return a * y + b;
            default: return a;
        }
    };
    const bool left = side == Side::Left;
    if (x < m.b_low || (x == m.b_low && left)) return waiting(x);
    if (x < m.beta_star || (x == m.beta_star && left)) return quad(x, order);
    switch (order) {
        case 0: return quad(m.beta_star, 0) + (x - m.beta_star);
        case 1: return 1.0;
        default: return 0.0;
    }
}

inline double V_mild_eval(const MildCandidate& m, double x, int order, Side side = Side::Right) {
    return 0.5 * (v_mild_eval(m, x, 0, order, side) + v_mild_eval(m, x, 1, order, side));
}

/// g_i(x) = (gamma_i - 2)(1/(q_i - sigma2) - a_i) x - (gamma_i - 1) b_i; i in {0, 1}.
inline double mild_g(const MildCandidate& m, int i, double x) {
    const double gi = m.g(i);
    return (gi - 2.0) * (1.0 / (m.q(i) - m.sigma2) - m.a(i)) * x - (gi - 1.0) * m.b(i);
}

/// Certificate polynomial used for the growth of u* near beta_star.
inline double mild_M(const MildCandidate& m, double x) {
    const double gap = m.q2 - m.q1;
    return (0.5 - (3.0 * m.sigma2 - m.q1) / gap) * x * x - 2.0 * m.q1 * m.q2 / gap * x - m.q1 * m.c1;
}

struct GrowthBoundReport {
    double min_M = std::numeric_limits<double>::infinity();
    double argmin_M = 0;
    /// min over the grid of u*(x)/(sigma2 x^2) - 1/(beta_star - x)
    double min_bound = std::numeric_limits<double>::infinity();
    double argmin_bound = 0;
    std::size_t points = 0;
};

/// Evaluates M(x; q2) and the explosion lower bound on grid points inside [b_low, beta_star).
inline GrowthBoundReport mild_growth_bound(const MildCandidate& m, std::span<const double> grid) {
    GrowthBoundReport r;
    for (double x : grid) {
        if (x < m.b_low || x >= m.beta_star) continue;
        ++r.points;
        const double M = mild_M(m, x);
        if (M < r.min_M) {
            r.min_M = M;
            r.argmin_M = x;
        }
        const double bound = u_star_eval(m, x) / (m.sigma2 * x * x) - 1.0 / (m.beta_star - x);
        if (bound < r.min_bound) {
            r.min_bound = bound;
            r.argmin_bound = x;
        }
    }
    return r;
}

inline MildThreshold mild_strategy(const MildCandidate& m, double delta) {
    return MildThreshold{mild_rate(m), m.beta_star, delta};
}

}  // namespace tisc
