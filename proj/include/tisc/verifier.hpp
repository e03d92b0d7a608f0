#pragma once

#include "tisc/errors.hpp"
#include "tisc/grid.hpp"
#include "tisc/mild_case.hpp"
#include "tisc/model.hpp"
#include "tisc/strong_case.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace tisc {

/// Per-atom value functions with one-sided derivatives up to order 2, plus the problem data they solve.
struct ValueBundle {
    using AtomValue = std::function<double(double x, int order, Side side)>;

    DiffusionModel model;
    WeightedDiscount disc;
    RunningCost cost;
    ThresholdStrategy strategy;
    std::vector<AtomValue> v;  ///< one per atom of disc
    double b = 0;              ///< lower edge of the top strong interval [b, r)
    RegionPartition partition;
    /// Pasting points and rate discontinuities; verification grids keep a guard band around them.
    std::vector<double> breakpoints;

    double atom(std::size_t k, double x, int order, Side side = Side::Right) const { return v[k](x, order, side); }
    double V(double x, int order, Side side = Side::Right) const {
        double s = 0.0;
        for (std::size_t k = 0; k < v.size(); ++k) s += disc[k].p * v[k](x, order, side);
        return s;
    }
    RateFunction rate() const { return rate_of(strategy); }
};

inline ValueBundle bundle_from_strong(const StrongCandidate& c) {
    ValueBundle B{DiffusionModel::gbm(std::sqrt(c.sigma2)),
                  WeightedDiscount::two_point(c.q1, c.q2),
                  RunningCost::half_square(),
                  StrongThreshold{c.b_star},
                  {},
                  c.b_star,
                  {},
                  {c.b_star}};
    for (int i = 0; i < 2; ++i)
        B.v.emplace_back([c, i](double x, int order, Side side) { return v_strong_eval(c, x, i, order, side); });
    B.partition.waiting = {{0.0, c.b_star}};
    B.partition.strong = {{c.b_star, kInf}};
    return B;
}

/// Requires a valid candidate (0 < b_low < beta_star).
inline ValueBundle bundle_from_mild(const MildCandidate& m, double delta = 0.1) {
    if (!(m.b_low > 0.0 && m.b_low < m.beta_star)) throw ParameterError("bundle_from_mild: candidate is not valid");
    ValueBundle B{DiffusionModel::gbm(std::sqrt(m.sigma2)),
                  WeightedDiscount::two_point(m.q1, m.q2),
                  RunningCost::half_square(),
                  mild_strategy(m, delta),
                  {},
                  m.beta_star,
                  {},
                  {m.b_low, m.beta_star}};
    for (int i = 0; i < 2; ++i)
        B.v.emplace_back([m, i](double x, int order, Side side) { return v_mild_eval(m, x, i, order, side); });
    B.partition.waiting = {{0.0, m.b_low}};
    B.partition.mild = {{m.b_low, m.beta_star}};
    B.partition.strong = {{m.beta_star, kInf}};
    return B;
}

// ---------------------------------------------------------------------------

struct VerificationGrid {
    std::vector<double> waiting;
    std::vector<double> mild;
    std::vector<double> strong;
    double guard = 1e-8;
    double s_truncation = 0;  ///< right end of the S grid
};

/// n points per nonempty region: composite grids on waiting intervals, uniform on mild intervals,
/// uniform on [b, s_factor * b] for S. Points within `guard` of a breakpoint are dropped.
inline VerificationGrid make_verification_grid(const ValueBundle& B, std::size_t n = 10000, double guard = 1e-8,
                                               double s_factor = 10.0) {
    VerificationGrid G;
    G.guard = guard;
    for (const auto& iv : B.partition.waiting) {
        const double lo = std::isfinite(iv.lo) ? iv.lo : iv.hi - 10.0 * std::max(1.0, std::abs(iv.hi));
        const auto g = composite_grid(lo, iv.hi, n, guard);
        G.waiting.insert(G.waiting.end(), g.begin(), g.end());
    }
    for (const auto& iv : B.partition.mild) {
        const auto g = uniform_grid(iv.lo + guard, iv.hi - guard, n);
        G.mild.insert(G.mild.end(), g.begin(), g.end());
    }
    G.s_truncation = s_factor * B.b;
    G.strong = uniform_grid(B.b, G.s_truncation, n);
    G.waiting = exclude_near(G.waiting, B.breakpoints, guard);
    G.mild = exclude_near(G.mild, B.breakpoints, guard);
    return G;
}

struct ConditionResult {
    bool pass = true;
    double margin = 0;  ///< worst value of the tested quantity
    double arg = 0;     ///< where the worst value occurs
    std::size_t points = 0;
};

struct VerificationVerdict {
    ConditionResult I;    ///< max (V' - 1) on int W, pass iff <= tol
    ConditionResult II;   ///< max |V' - 1| on the M grid, pass iff <= tol
    ConditionResult III;  ///< min (f + mu - sum p q v) on the S grid, pass iff >= -tol
    double smooth_fit = 0;
    bool smooth_fit_pass = true;
    std::vector<double> bvp_residual_max;  ///< per atom, relative, over W and M grids
    std::vector<double> sup_v, sup_dv, sup_d2v;
    double tol = 1e-9;
    double smooth_fit_tol = 1e-8;
    double guard = 0;
    double s_truncation = 0;
    std::size_t grid_points = 0;

    bool all_pass() const { return I.pass && II.pass && III.pass; }
};

// ---------------------------------------------------------------------------

struct BvpResidualProfile {
    std::vector<std::vector<double>> residual;  ///< [atom][point], absolute
    std::vector<double> max_abs;
    std::vector<double> max_rel;  ///< residual / (sum of magnitudes of the equation's terms)
    std::vector<double> affine_max;
    std::vector<double> boundary;  ///< |v(l+) - f(l)/q| per atom; NaN for infinite l
};

namespace detail {

inline void reject_breakpoints(const ValueBundle& B, std::span<const double> grid, const char* who) {
    for (double x : grid)
        for (double p : B.breakpoints)
            if (std::abs(x - p) <= 1e-12 * std::max(1.0, std::abs(p)))
                throw DomainError(std::string(who) + ": grid contains an excluded point");
}

}  // namespace detail

/// Residual of f + (A - q) v - u v' + u on W and M points of `grid`, of v' = 1 and v'' = 0 on S points.
inline BvpResidualProfile bvp_residual(const ValueBundle& B, std::span<const double> grid) {
    detail::reject_breakpoints(B, grid, "bvp_residual");
    const auto u = B.rate();
    const auto S = strong_region(B.strategy, B.model);
    const std::size_t K = B.disc.size();
    BvpResidualProfile R;
    R.residual.assign(K, {});
    R.max_abs.assign(K, 0.0);
    R.max_rel.assign(K, 0.0);
    R.affine_max.assign(K, 0.0);
    R.boundary.assign(K, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < K; ++k) {
        const double q = B.disc[k].q;
        for (double x : grid) {
            if (!B.model.contains(x)) throw DomainError("bvp_residual: grid point outside (lower, upper)");
            const double v0 = B.atom(k, x, 0), v1 = B.atom(k, x, 1), v2 = B.atom(k, x, 2);
            if (in_strong_region(S, x)) {
                R.affine_max[k] = std::max(R.affine_max[k], std::abs(v1 - 1.0) + std::abs(v2));
                R.residual[k].push_back(0.0);
                continue;
            }
            const double f = B.cost(x), mu = B.model.mu(x), s2 = B.model.sigma2(x), ux = u(x);
            const double terms[] = {f, mu * v1, 0.5 * s2 * v2, -q * v0, -ux * v1, ux};
            double r = 0.0, scale = 0.0;
            for (double t : terms) {
                r += t;
                scale += std::abs(t);
            }
            R.residual[k].push_back(r);
            R.max_abs[k] = std::max(R.max_abs[k], std::abs(r));
            if (scale > 0.0) R.max_rel[k] = std::max(R.max_rel[k], std::abs(r) / scale);
        }
        if (std::isfinite(B.model.lower)) {
            const double xl = B.model.lower + 1e-10 * std::max(1.0, std::abs(B.model.lower));
            R.boundary[k] = std::abs(B.atom(k, xl, 0) - B.cost.f_at_l / q);
        }
    }
    return R;
}

inline double smooth_fit_check(const ValueBundle& B) {
    return std::abs(B.V(B.b, 2, Side::Left) - B.V(B.b, 2, Side::Right));
}

/// f + mu - sum_k p_k q_k v(x; q_k); condition (III) asks for >= 0 on S.
inline double jump_balance(const ValueBundle& B, double x) {
    double s = 0.0;
    for (std::size_t k = 0; k < B.disc.size(); ++k) s += B.disc[k].p * B.disc[k].q * B.atom(k, x, 0);
    return B.cost(x) + B.model.mu(x) - s;
}

/// Deviation gain of an immediate jump from x in S; nonpositive at equilibrium.
inline double deviation_gain_jump(const ValueBundle& B, double x) {
    if (x < B.b) throw DomainError("deviation_gain_jump: x must be >= b");
    return -jump_balance(B, x);
}

/// Deviation gain of switching from rate u_star to rate u at x; nonpositive at equilibrium.
inline double deviation_gain_rate(const ValueBundle& B, const RateFunction& u_star, const RateFunction& u, double x) {
    const double du = u.left_limit(x) + u(x) - u_star.left_limit(x) - u_star(x);
    return 0.5 * du * (B.V(x, 1) - 1.0);
}

inline VerificationVerdict verify_conditions(const ValueBundle& B, const VerificationGrid& G, double tol = 1e-9,
                                             double smooth_fit_tol = 1e-8) {
    const bool need_w = !B.partition.waiting.empty(), need_m = !B.partition.mild.empty();
    if ((need_w && G.waiting.empty()) || (need_m && G.mild.empty()) || G.strong.empty())
        throw InsufficientDataError("verify_conditions: a nonempty region has an empty grid");
    VerificationVerdict V;
    V.tol = tol;
    V.smooth_fit_tol = smooth_fit_tol;
    V.guard = G.guard;
    V.s_truncation = G.s_truncation;
    V.grid_points = G.waiting.size() + G.mild.size() + G.strong.size();

    V.I.margin = -kInf;
    for (double x : G.waiting) {
        const double m = B.V(x, 1) - 1.0;
        if (m > V.I.margin) V.I = {true, m, x, 0};
    }
    V.I.points = G.waiting.size();
    V.I.pass = G.waiting.empty() || V.I.margin <= tol;

    V.II.margin = 0.0;
    for (double x : G.mild) {
        const double m = std::abs(B.V(x, 1) - 1.0);
        if (m > V.II.margin) V.II = {true, m, x, 0};
    }
    V.II.points = G.mild.size();
    V.II.pass = V.II.margin <= tol;

    V.III.margin = kInf;
    for (double x : G.strong) {
        const double m = jump_balance(B, x);
        if (m < V.III.margin) V.III = {true, m, x, 0};
    }
    V.III.points = G.strong.size();
    V.III.pass = V.III.margin >= -tol;

    V.smooth_fit = smooth_fit_check(B);
    V.smooth_fit_pass = V.smooth_fit <= smooth_fit_tol;

    std::vector<double> wm(G.waiting);
    wm.insert(wm.end(), G.mild.begin(), G.mild.end());
    const auto R = bvp_residual(B, wm);
    V.bvp_residual_max = R.max_rel;

    const std::size_t K = B.disc.size();
    V.sup_v.assign(K, 0.0);
    V.sup_dv.assign(K, 0.0);
    V.sup_d2v.assign(K, 0.0);
    for (const auto* g : {&G.waiting, &G.mild, &G.strong})
        for (double x : *g)
            for (std::size_t k = 0; k < K; ++k) {
                V.sup_v[k] = std::max(V.sup_v[k], std::abs(B.atom(k, x, 0)));
                V.sup_dv[k] = std::max(V.sup_dv[k], std::abs(B.atom(k, x, 1)));
                V.sup_d2v[k] = std::max(V.sup_d2v[k], std::abs(B.atom(k, x, 2)));
            }
    return V;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for the per-atom BVP.

struct OracleBC {
    enum class Kind { Dirichlet, Neumann };
    Kind kind = Kind::Dirichlet;
    double value = 0;

    static OracleBC dirichlet(double v) { return {Kind::Dirichlet, v}; }
    static OracleBC neumann(double d) { return {Kind::Neumann, d}; }
};

/// Solves sigma^2/2 v'' + (mu - u) v' - q v + f + u = 0 on `mesh` with three-point differences
/// (second order on uniform stretches) and the given end conditions. Neumann ends use a reflected ghost node.
/// A node on a declared rate discontinuity uses the mean of u(x-) and u(x), which keeps second order there.
inline std::vector<double> ode_oracle_solve(const DiffusionModel& model, double q, const RunningCost& cost,
                                            const RateFunction& u, std::span<const double> mesh, OracleBC left,
                                            OracleBC right) {
    const std::size_t n = mesh.size();
    if (n < 3) throw InsufficientDataError("ode_oracle_solve: mesh needs >= 3 points");
    for (std::size_t i = 1; i < n; ++i)
        if (!(mesh[i] > mesh[i - 1])) throw DomainError("ode_oracle_solve: mesh must be increasing");
    if (!(q > 0.0)) throw DomainError("ode_oracle_solve: q must be > 0");

    // Row i: lo[i] v[i-1] + di[i] v[i] + up[i] v[i+1] = rhs[i]
    std::vector<double> lo(n, 0.0), di(n, 0.0), up(n, 0.0), rhs(n, 0.0);
    auto interior = [&](std::size_t i, double hm, double hp) {
        const double x = mesh[i];
        const double ux = 0.5 * (u.left_limit(x) + u(x));
        const double a = 0.5 * model.sigma2(x), c = model.mu(x) - ux;
        const double d2m = 2.0 / (hm * (hm + hp)), d2c = -2.0 / (hm * hp), d2p = 2.0 / (hp * (hm + hp));
        const double d1m = -hp / (hm * (hm + hp)), d1c = (hp - hm) / (hm * hp), d1p = hm / (hp * (hm + hp));
        lo[i] = a * d2m + c * d1m;
        di[i] = a * d2c + c * d1c - q;
        up[i] = a * d2p + c * d1p;
        rhs[i] = -(cost(x) + ux);
    };
    for (std::size_t i = 1; i + 1 < n; ++i) interior(i, mesh[i] - mesh[i - 1], mesh[i + 1] - mesh[i]);

    if (left.kind == OracleBC::Kind::Dirichlet) {
        di[0] = 1.0;
        rhs[0] = left.value;
    } else {  // ghost v[-1] = v[1] - 2h g
        const double h = mesh[1] - mesh[0];
        interior(0, h, h);
        rhs[0] += lo[0] * 2.0 * h * left.value;
        up[0] += lo[0];
        lo[0] = 0.0;
    }
    if (right.kind == OracleBC::Kind::Dirichlet) {
        di[n - 1] = 1.0;
        rhs[n - 1] = right.value;
    } else {  // ghost v[n] = v[n-2] + 2h g
        const double h = mesh[n - 1] - mesh[n - 2];
        interior(n - 1, h, h);
        rhs[n - 1] -= up[n - 1] * 2.0 * h * right.value;
        lo[n - 1] += up[n - 1];
        up[n - 1] = 0.0;
    }

    // Thomas elimination.
    for (std::size_t i = 1; i < n; ++i) {
        if (di[i - 1] == 0.0 || !std::isfinite(di[i - 1])) throw NumericalError("ode_oracle_solve: singular system");
        const double w = lo[i] / di[i - 1];
        di[i] -= w * up[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    if (di[n - 1] == 0.0 || !std::isfinite(di[n - 1])) throw NumericalError("ode_oracle_solve: singular system");
    std::vector<double> v(n);
    v[n - 1] = rhs[n - 1] / di[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) v[i] = (rhs[i] - up[i] * v[i + 1]) / di[i];
    return v;
}

/// Default end data: v(mesh.front()) = f(l)/q, v'(mesh.back()) = 1.
inline std::vector<double> ode_oracle_solve(const DiffusionModel& model, double q, const RunningCost& cost,
                                            const RateFunction& u, std::span<const double> mesh) {
    return ode_oracle_solve(model, q, cost, u, mesh, OracleBC::dirichlet(cost.f_at_l / q), OracleBC::neumann(1.0));
}

}  // namespace tisc
