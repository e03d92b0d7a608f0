#pragma once

#include "tisc/errors.hpp"
#include "tisc/model.hpp"

#include <boost/numeric/odeint.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace tisc {

struct ScaleOptions {
    double rel_tol = 1e-11;
    double abs_tol = 1e-14;
    /// Cached breakpoints at beta - (beta - c) 2^-k, k = 1..grading_levels.
    int grading_levels = 30;
};

/// Running integrals from the base point c, all as functions of the upper limit x:
///   I = int 2(mu - u)/sigma^2,  s = int exp(-I),  m = int 2 exp(I)/sigma^2,
///   E = int s' m  (entrance integral),  N = int 2 s exp(I)/sigma^2  (speed-scale integral).
struct ScaleState {
    double I = 0, s = 0, m = 0, E = 0, N = 0;
    double s_prime() const { return std::exp(-I); }
};

/// Scale function of dX = (mu - u) dt + sigma dW on [c, beta). The five integrals are advanced
/// together as one ODE system with adaptive Dormand-Prince steps; segments are split at the rate's
/// discontinuities so no step straddles a jump, and graded toward beta.
class ScaleFunction {
public:
    ScaleFunction(DiffusionModel model, RateFunction u, double beta, std::optional<double> c = std::nullopt,
                  ScaleOptions opt = {})
        : model_(std::move(model)), u_(std::move(u)), beta_(beta), opt_(opt) {
        if (!(beta > model_.lower && beta <= model_.upper)) throw DomainError("ScaleFunction: beta outside (l, r]");
        c_ = c ? *c : default_base_point();
        if (!(c_ > model_.lower && c_ < beta_)) throw DomainError("ScaleFunction: base point must lie in (l, beta)");
        build_cache();
    }

    double base() const { return c_; }
    double beta() const { return beta_; }
    const ScaleOptions& options() const { return opt_; }

    /// Integrals at x in [c, beta). Non-finite components mean overflow on the way to x.
    ScaleState state_at(double x) const {
        if (!(x >= c_) || !(x < beta_)) throw DomainError("ScaleFunction: x must lie in [c, beta)");
        auto it = std::upper_bound(knots_.begin(), knots_.end(), x);
        const std::size_t j = static_cast<std::size_t>(it - knots_.begin()) - 1;
        if (knots_[j] == x) return states_[j];
        if (!finite(states_[j])) return states_[j];
        const double hi = j + 1 < knots_.size() ? knots_[j + 1] : beta_;
        return advance(states_[j], knots_[j], x, hi);
    }

private:
    using Vec = std::array<double, 5>;

    static bool finite(const ScaleState& s) {
        return std::isfinite(s.I) && std::isfinite(s.s) && std::isfinite(s.m) && std::isfinite(s.E) &&
               std::isfinite(s.N);
    }

    /// Midpoint of the longest piece of (l, beta) between declared discontinuities on which u vanishes.
    double default_base_point() const {
        std::vector<double> cuts{model_.lower};
        for (double d : u_.discontinuities())
            if (d > model_.lower && d < beta_) cuts.push_back(d);
        cuts.push_back(beta_);
        double best_len = -1.0, best = 0.0;
        for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
            double lo = cuts[i], hi = cuts[i + 1];
            if (!std::isfinite(lo)) lo = hi - 1.0;
            const double mid = 0.5 * (lo + hi);
            if (u_(mid) == 0.0 && hi - lo > best_len) {
                best_len = hi - lo;
                best = mid;
            }
        }
        if (best_len > 0.0) return best;
        const double lo = std::isfinite(model_.lower) ? model_.lower : beta_ - 1.0;
        return 0.5 * (lo + beta_);
    }

    /// Integrates from (state a at xa) to xb; `seg_hi` is the next declared breakpoint, where u is
    /// taken as its left limit.
    ScaleState advance(const ScaleState& a, double xa, double xb, double seg_hi) const {
        namespace ode = boost::numeric::odeint;
        Vec y{a.I, a.s, a.m, a.E, a.N};
        auto rhs = [this, seg_hi](const Vec& y, Vec& dy, double x) {
            const double ux = x >= seg_hi ? u_.left_limit(seg_hi) : u_(x);
            const double s2 = model_.sigma2(x);
            const double eI = std::exp(y[0]), emI = std::exp(-y[0]);
            dy[0] = 2.0 * (model_.mu(x) - ux) / s2;
            dy[1] = emI;
            dy[2] = 2.0 * eI / s2;
            dy[3] = emI * y[2];
            dy[4] = 2.0 * y[1] * eI / s2;
        };
        auto stepper = ode::make_controlled(opt_.abs_tol, opt_.rel_tol, ode::runge_kutta_dopri5<Vec>());
        const double len = xb - xa;
        ode::integrate_adaptive(stepper, rhs, y, xa, xb, len / 16.0);
        return {y[0], y[1], y[2], y[3], y[4]};
    }

    void build_cache() {
        knots_ = {c_};
        for (double d : u_.discontinuities())
            if (d > c_ && d < beta_) knots_.push_back(d);
        if (std::isfinite(beta_)) {
            for (int k = 1; k <= opt_.grading_levels; ++k) knots_.push_back(beta_ - (beta_ - c_) * std::ldexp(1.0, -k));
        } else {
            for (int k = 1; k <= opt_.grading_levels; ++k) knots_.push_back(c_ + std::ldexp(1.0, k));
        }
        std::sort(knots_.begin(), knots_.end());
        knots_.erase(std::unique(knots_.begin(), knots_.end()), knots_.end());
        while (!knots_.empty() && !(knots_.back() < beta_)) knots_.pop_back();

        std::vector<double> jumps = u_.discontinuities();
        states_.assign(1, ScaleState{});
        for (std::size_t j = 1; j < knots_.size(); ++j) {
            const ScaleState& prev = states_.back();
            if (!finite(prev)) {
                states_.push_back(prev);
                continue;
            }
            // left limit only matters when the segment ends on a declared jump
            const bool ends_on_jump = std::binary_search(jumps.begin(), jumps.end(), knots_[j]);
            states_.push_back(advance(prev, knots_[j - 1], knots_[j], ends_on_jump ? knots_[j] : kInf));
        }
    }

    DiffusionModel model_;
    RateFunction u_;
    double beta_;
    double c_ = 0;
    ScaleOptions opt_;
    std::vector<double> knots_;
    std::vector<ScaleState> states_;
};

/// (s(x), s'(x)).
inline std::pair<double, double> scale_eval(const ScaleFunction& sf, double x) {
    const auto st = sf.state_at(x);
    return {st.s, st.s_prime()};
}

// ---------------------------------------------------------------------------
// Feller classification of the upper boundary from truncated integrals.

enum class Divergence { Divergent, Convergent, Inconclusive };
enum class BoundaryVerdict { EntranceNotExit, Accessible, Inconclusive };

inline const char* to_string(Divergence d) {
    switch (d) {
        case Divergence::Divergent: return "Divergent";
        case Divergence::Convergent: return "Convergent";
        default: return "Inconclusive";
    }
}

inline const char* to_string(BoundaryVerdict v) {
    switch (v) {
        case BoundaryVerdict::EntranceNotExit: return "EntranceNotExit";
        case BoundaryVerdict::Accessible: return "Accessible";
        default: return "Inconclusive";
    }
}

struct DivergenceTest {
    /// Divergent when every one of the last `window` increment ratios is >= this.
    double ratio_divergent = 0.9;
    /// Convergent when every one of them is <= this and the Cauchy test passes.
    double ratio_convergent = 0.5;
    /// Cauchy test: last increment <= cauchy_rel * |last value|.
    double cauchy_rel = 1e-3;
    std::size_t window = 3;
};

/// Growth test on a nondecreasing sequence of truncated integrals. Any non-finite value counts as divergence.
inline Divergence classify_sequence(std::span<const double> v, const DivergenceTest& t = {}) {
    if (v.size() < 4) throw InsufficientDataError("classify_sequence: at least 4 values required");
    for (double x : v)
        if (!std::isfinite(x)) return Divergence::Divergent;
    std::vector<double> ratios;
    for (std::size_t j = 2; j < v.size(); ++j) {
        const double d0 = v[j - 1] - v[j - 2], d1 = v[j] - v[j - 1];
        ratios.push_back(d0 > 0.0 ? d1 / d0 : (d1 > 0.0 ? kInf : 0.0));
    }
    const std::size_t w = std::min(t.window, ratios.size());
    const auto tail = std::span<const double>(ratios).last(w);
    const bool all_big = std::all_of(tail.begin(), tail.end(), [&](double r) { return r >= t.ratio_divergent; });
    const bool all_small = std::all_of(tail.begin(), tail.end(), [&](double r) { return r <= t.ratio_convergent; });
    if (all_big) return Divergence::Divergent;
    const double last_inc = v[v.size() - 1] - v[v.size() - 2];
    if (all_small && std::abs(last_inc) <= t.cauchy_rel * std::abs(v.back())) return Divergence::Convergent;
    return Divergence::Inconclusive;
}

struct BoundaryReport {
    double base_point = 0;
    std::vector<double> truncations;
    std::vector<double> entrance_integral_estimates;  ///< int_c^x s'(y) int_c^y 2/(s' sigma^2) dz dy
    std::vector<double> speed_scale_integral;         ///< int_c^x 2 s/(s' sigma^2)
    Divergence entrance_verdict = Divergence::Inconclusive;
    Divergence speed_scale_verdict = Divergence::Inconclusive;
    BoundaryVerdict verdict = BoundaryVerdict::Inconclusive;
    DivergenceTest test;
    double ode_rel_tol = 0, ode_abs_tol = 0;
};

/// Ladder beta - 10^-k, k = 1..8, keeping only points above the base point.
inline std::vector<double> default_ladder(const ScaleFunction& sf, int kmax = 8) {
    std::vector<double> out;
    for (int k = 1; k <= kmax; ++k) {
        const double x = sf.beta() - std::pow(10.0, -k);
        if (x > sf.base()) out.push_back(x);
    }
    return out;
}

/// EntranceNotExit iff the entrance integral diverges and the speed-scale integral converges;
/// Accessible iff the entrance integral converges.
inline BoundaryReport feller_classify_upper(const ScaleFunction& sf, double beta, std::span<const double> truncations,
                                            const DivergenceTest& test = {}) {
    if (beta != sf.beta()) throw DomainError("feller_classify_upper: beta differs from the scale function's beta");
    if (truncations.size() < 4) throw InsufficientDataError("feller_classify_upper: at least 4 truncation points required");
    for (std::size_t i = 0; i < truncations.size(); ++i) {
        if (!(truncations[i] >= sf.base() && truncations[i] < beta))
            throw DomainError("feller_classify_upper: truncations must lie in [c, beta)");
        if (i > 0 && !(truncations[i] > truncations[i - 1]))
            throw DomainError("feller_classify_upper: truncations must increase toward beta");
    }
    BoundaryReport r;
    r.base_point = sf.base();
    r.test = test;
    r.ode_rel_tol = sf.options().rel_tol;
    r.ode_abs_tol = sf.options().abs_tol;
    r.truncations.assign(truncations.begin(), truncations.end());
    for (double x : truncations) {
        const auto st = sf.state_at(x);
        r.entrance_integral_estimates.push_back(st.E);
        r.speed_scale_integral.push_back(st.N);
    }
    r.entrance_verdict = classify_sequence(r.entrance_integral_estimates, test);
    r.speed_scale_verdict = classify_sequence(r.speed_scale_integral, test);
    if (r.entrance_verdict == Divergence::Divergent && r.speed_scale_verdict == Divergence::Convergent)
        r.verdict = BoundaryVerdict::EntranceNotExit;
    else if (r.entrance_verdict == Divergence::Convergent)
        r.verdict = BoundaryVerdict::Accessible;
    return r;
}

}  // namespace tisc
