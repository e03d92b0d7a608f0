#pragma once

#include "tisc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace tisc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Uncontrolled diffusion dX = mu(X) dt + sigma(X) dW on (lower, upper).

struct DiffusionModel {
    std::function<double(double)> mu;
    std::function<double(double)> sigma;
    double lower = -kInf;
    double upper = kInf;
    /// Set only for mu == 0, sigma(x) = s*x on (0, inf); enables the vectorised simulator.
    std::optional<double> gbm_sigma;

    static DiffusionModel general(std::function<double(double)> mu, std::function<double(double)> sigma,
                                  double lower, double upper) {
        if (!(lower < upper)) throw ParameterError("DiffusionModel: lower must be < upper");
        if (!mu || !sigma) throw ParameterError("DiffusionModel: mu and sigma must be callable");
        return DiffusionModel{std::move(mu), std::move(sigma), lower, upper, std::nullopt};
    }

    static DiffusionModel gbm(double s) {
        if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("DiffusionModel::gbm: sigma must be > 0");
        return DiffusionModel{[](double) { return 0.0; }, [s](double x) { return s * x; }, 0.0, kInf, s};
    }

    bool contains(double x) const { return x > lower && x < upper; }
    double sigma2(double x) const {
        const double s = sigma(x);
        return s * s;
    }
};

/// Clauses of the DiffusionModel invariants violated on the sample grid.
inline std::vector<std::string> model_violations(const DiffusionModel& m, std::span<const double> grid) {
    std::vector<std::string> out;
    if (!(m.lower < m.upper)) out.emplace_back("lower < upper");
    for (double x : grid) {
        if (!m.contains(x)) continue;
        if (!(m.sigma(x) > 0.0)) {
            out.push_back("sigma(x) > 0 fails at x=" + std::to_string(x));
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Weighted discount function h(t) = sum_k p_k exp(-q_k t) with finitely many atoms.

struct DiscountAtom {
    double q;
    double p;
};

class WeightedDiscount {
public:
    explicit WeightedDiscount(std::vector<DiscountAtom> atoms) : atoms_(std::move(atoms)) {
        if (atoms_.empty()) throw ParameterError("WeightedDiscount: at least one atom required");
        double total = 0.0;
        for (const auto& a : atoms_) {
            if (!(a.q > 0.0) || !std::isfinite(a.q)) throw ParameterError("WeightedDiscount: rates must be > 0");
            if (!(a.p > 0.0)) throw ParameterError("WeightedDiscount: weights must be > 0");
            total += a.p;
        }
        if (std::abs(total - 1.0) > 1e-12) throw ParameterError("WeightedDiscount: weights must sum to 1");
    }

    static WeightedDiscount two_point(double q1, double q2) { return WeightedDiscount({{q1, 0.5}, {q2, 0.5}}); }

    const std::vector<DiscountAtom>& atoms() const { return atoms_; }
    std::size_t size() const { return atoms_.size(); }
    const DiscountAtom& operator[](std::size_t k) const { return atoms_[k]; }
    double min_rate() const {
        double m = kInf;
        for (const auto& a : atoms_) m = std::min(m, a.q);
        return m;
    }

private:
    std::vector<DiscountAtom> atoms_;
};

inline double wdf_eval(const WeightedDiscount& disc, double t) {
    if (!(t >= 0.0)) throw DomainError("wdf_eval: t must be >= 0");
    double h = 0.0;
    for (const auto& a : disc.atoms()) h += a.p * std::exp(-a.q * t);
    return h;
}

struct DiscountMoments {
    double mean;
    double second_moment;
    double inv_moment;
};

inline DiscountMoments wdf_moments(const WeightedDiscount& disc) {
    DiscountMoments m{0.0, 0.0, 0.0};
    for (const auto& a : disc.atoms()) {
        m.mean += a.p * a.q;
        m.second_moment += a.p * a.q * a.q;
        m.inv_moment += a.p / a.q;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Running cost f: nonnegative, nondecreasing.

struct RunningCost {
    std::function<double(double)> f;
    double f_at_l = 0.0;
    /// f(x) = x^2/2; enables the vectorised simulator.
    bool quadratic = false;

    static RunningCost half_square() { return {[](double x) { return 0.5 * x * x; }, 0.0, true}; }
    static RunningCost general(std::function<double(double)> f, double f_at_l) {
        return {std::move(f), f_at_l, false};
    }
    double operator()(double x) const { return f(x); }
};

inline std::vector<std::string> cost_violations(const RunningCost& c, std::span<const double> grid) {
    std::vector<std::string> out;
    if (c.f_at_l < 0.0) out.emplace_back("f(l) >= 0");
    double prev = -kInf;
    for (double x : grid) {
        const double v = c(x);
        if (v < 0.0) {
            out.push_back("f >= 0 fails at x=" + std::to_string(x));
            break;
        }
        if (v < prev) {
            out.push_back("f nondecreasing fails at x=" + std::to_string(x));
            break;
        }
        prev = v;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Control rates u_beta: evaluable function plus its declared discontinuities.

/// u(x) = 0 for x < start, (p2 x^2 + p1 x + p0)/(d1 x + d0) on [start, pole), clamped to cap.
/// Within cap_band of the pole the cap is returned directly.
struct RationalRate {
    double p2 = 0, p1 = 0, p0 = 0;
    double d1 = 0, d0 = 1;
    double start = 0;
    double pole = kInf;
    double cap = 1e15;
    double cap_band = 1e-12;

    double eval(double x) const {
        if (x < start) return 0.0;
        if (x >= pole - cap_band) return cap;
        const double v = ((p2 * x + p1) * x + p0) / (d1 * x + d0);
        return std::min(v, cap);
    }
};

class RateFunction {
    struct Zero {};
    struct Constant {
        double c;
    };
    struct General {
        std::function<double(double)> fn;
    };
    using Kind = std::variant<Zero, Constant, RationalRate, General>;

public:
    RateFunction() : kind_(Zero{}) {}

    static RateFunction zero() { return RateFunction(); }
    static RateFunction constant(double c) {
        if (!(c >= 0.0)) throw ParameterError("RateFunction: constant rate must be >= 0");
        return RateFunction(Constant{c}, {});
    }
    static RateFunction rational(const RationalRate& r) {
        std::vector<double> jumps;
        if (std::isfinite(r.start) && r.eval(r.start) != 0.0) jumps.push_back(r.start);
        return RateFunction(r, std::move(jumps));
    }
    /// `discontinuities` must be sorted; u is taken right-continuous at each.
    static RateFunction general(std::function<double(double)> fn, std::vector<double> discontinuities = {}) {
        if (!fn) throw ParameterError("RateFunction: callable required");
        return RateFunction(General{std::move(fn)}, std::move(discontinuities));
    }

    double operator()(double x) const {
        return std::visit(
            [x](const auto& k) -> double {
                using T = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<T, Zero>) return 0.0;
                else if constexpr (std::is_same_v<T, Constant>) return k.c;
                else if constexpr (std::is_same_v<T, RationalRate>) return k.eval(x);
                else return k.fn(x);
            },
            kind_);
    }

    /// u(x-). Differs from u(x) only at declared discontinuities.
    double left_limit(double x) const {
        if (std::binary_search(jumps_.begin(), jumps_.end(), x))
            return (*this)(std::nextafter(x, -kInf));
        return (*this)(x);
    }

    const std::vector<double>& discontinuities() const { return jumps_; }
    const RationalRate* as_rational() const { return std::get_if<RationalRate>(&kind_); }
    bool is_zero() const { return std::holds_alternative<Zero>(kind_); }

private:
    RateFunction(Kind k, std::vector<double> jumps) : kind_(std::move(k)), jumps_(std::move(jumps)) {}
    Kind kind_;
    std::vector<double> jumps_;
};

// ---------------------------------------------------------------------------
// Threshold strategies.

struct Interval {
    double lo;
    double hi;
    bool operator==(const Interval&) const = default;
};

/// Reflection at b; initial jump to b from above.
struct StrongThreshold {
    double b;
};

/// Rate u exploding at beta; S = [beta, r); initial jump to beta - delta from x >= beta.
struct MildThreshold {
    RateFunction u;
    double beta;
    double delta;
};

/// (u_beta, S = union [b_i, a_i], delta); the last interval ends at r.
struct GeneralisedThreshold {
    RateFunction u;
    double beta;
    std::vector<Interval> S;
    double delta;
};

using ThresholdStrategy = std::variant<StrongThreshold, MildThreshold, GeneralisedThreshold>;

inline std::vector<Interval> strong_region(const ThresholdStrategy& s, const DiffusionModel& m) {
    return std::visit(
        [&m](const auto& k) -> std::vector<Interval> {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, StrongThreshold>) return {{k.b, m.upper}};
            else if constexpr (std::is_same_v<T, MildThreshold>) return {{k.beta, m.upper}};
            else return k.S;
        },
        s);
}

inline RateFunction rate_of(const ThresholdStrategy& s) {
    return std::visit(
        [](const auto& k) -> RateFunction {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, StrongThreshold>) return RateFunction::zero();
            else return k.u;
        },
        s);
}

/// Lower edge of the topmost strong interval (b for Strong, beta for Mild).
inline double threshold_of(const ThresholdStrategy& s, const DiffusionModel& m) {
    const auto S = strong_region(s, m);
    return S.empty() ? m.upper : S.back().lo;
}

enum class Region { Waiting, Mild, Strong };

inline char region_code(Region r) {
    switch (r) {
        case Region::Waiting: return 'W';
        case Region::Mild: return 'M';
        default: return 'S';
    }
}

inline bool in_strong_region(const std::vector<Interval>& S, double x) {
    for (const auto& iv : S)
        if (x >= iv.lo && x <= iv.hi) return true;
    return false;
}

inline Region classify(const ThresholdStrategy& s, const DiffusionModel& m, double x) {
    if (in_strong_region(strong_region(s, m), x)) return Region::Strong;
    return rate_of(s)(x) > 0.0 ? Region::Mild : Region::Waiting;
}

struct RegionPartition {
    std::vector<Interval> waiting;
    std::vector<Interval> mild;
    std::vector<Interval> strong;
    bool operator==(const RegionPartition&) const = default;
};

/// Region of x under a reconstructed partition. Strong intervals are closed, the rest half-open [lo, hi).
inline Region region_at(const RegionPartition& p, double x) {
    for (const auto& iv : p.strong)
        if (x >= iv.lo && x <= iv.hi) return Region::Strong;
    for (const auto& iv : p.mild)
        if (x >= iv.lo && x < iv.hi) return Region::Mild;
    return Region::Waiting;
}

/// Classifies each grid point and rebuilds maximal runs. A run boundary between two grid
/// points snaps to a declared point (S endpoint or rate discontinuity) when one lies in
/// between, otherwise to the midpoint. Outer runs extend to (lower, upper).
inline RegionPartition regions_of_strategy(const ThresholdStrategy& s, const DiffusionModel& m,
                                           std::span<const double> grid) {
    if (grid.empty()) throw InsufficientDataError("regions_of_strategy: empty grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!m.contains(grid[i])) throw DomainError("regions_of_strategy: grid point outside (lower, upper)");
        if (i > 0 && !(grid[i] > grid[i - 1])) throw DomainError("regions_of_strategy: grid must be increasing");
    }
    const auto S = strong_region(s, m);
    const auto u = rate_of(s);
    std::vector<double> declared = u.discontinuities();
    for (const auto& iv : S) {
        declared.push_back(iv.lo);
        declared.push_back(iv.hi);
    }
    std::sort(declared.begin(), declared.end());

    auto label = [&](double x) {
        if (in_strong_region(S, x)) return Region::Strong;
        return u(x) > 0.0 ? Region::Mild : Region::Waiting;
    };
    auto cut = [&](double a, double b) {
        auto it = std::upper_bound(declared.begin(), declared.end(), a);
        if (it != declared.end() && *it <= b) return *it;
        return 0.5 * (a + b);
    };

    RegionPartition out;
    auto push = [&out](Region r, double lo, double hi) {
        auto& v = r == Region::Waiting ? out.waiting : r == Region::Mild ? out.mild : out.strong;
        v.push_back({lo, hi});
    };
    Region cur = label(grid[0]);
    double lo = m.lower;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        const Region r = label(grid[i]);
        if (r == cur) continue;
        const double c = cut(grid[i - 1], grid[i]);
        push(cur, lo, c);
        cur = r;
        lo = c;
    }
    push(cur, lo, m.upper);
    return out;
}

// ---------------------------------------------------------------------------
// Structural validation. Violations are collected, never thrown.

struct ValidationReport {
    std::vector<std::string> violations;
    bool valid() const { return violations.empty(); }
};

namespace detail {

inline void check_rate(const RateFunction& u, double lo, double hi, std::span<const double> sample,
                       std::vector<std::string>& out) {
    const auto& j = u.discontinuities();
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!std::isfinite(j[i])) out.emplace_back("rate: discontinuity points must be finite");
        if (i > 0 && !(j[i] > j[i - 1])) out.emplace_back("rate: discontinuity list must be strictly increasing");
    }
    for (double x : sample) {
        if (!(x > lo && x < hi)) continue;
        const double v = u(x);
        if (!(v >= 0.0)) {
            out.push_back("rate: u(x) >= 0 fails at x=" + std::to_string(x));
            break;
        }
    }
}

}  // namespace detail

/// `sample` is an optional grid on which the rate's nonnegativity is checked.
inline ValidationReport validate_strategy(const ThresholdStrategy& s, const DiffusionModel& m,
                                          std::span<const double> sample = {}) {
    ValidationReport rep;
    auto& out = rep.violations;
    std::visit(
        [&](const auto& k) {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, StrongThreshold>) {
                if (!(k.b > m.lower && k.b < m.upper)) out.emplace_back("strong: lower < b < upper");
            } else if constexpr (std::is_same_v<T, MildThreshold>) {
                if (!(k.beta > m.lower && k.beta < m.upper)) out.emplace_back("mild: lower < beta < upper");
                if (!(k.delta > 0.0 && k.delta < k.beta - m.lower)) out.emplace_back("mild (iii): 0 < delta < beta - l");
                detail::check_rate(k.u, m.lower, k.beta, sample, out);
            } else {
                const auto& S = k.S;
                if (!(k.beta > m.lower && k.beta <= m.upper)) out.emplace_back("generalised: beta in (l, r]");
                if (S.empty()) {
                    out.emplace_back("generalised: S must contain at least one interval");
                    return;
                }
                for (std::size_t i = 0; i < S.size(); ++i) {
                    if (!(S[i].lo <= S[i].hi)) out.emplace_back("generalised: b_i <= a_i");
                    if (i > 0 && !(S[i - 1].hi < S[i].lo)) out.emplace_back("generalised: a_{i-1} < b_i");
                }
                if (S.front().lo < m.lower) out.emplace_back("generalised: l <= b_1");
                if (S.back().hi != m.upper) out.emplace_back("generalised: a_n = r");
                const std::size_t n = S.size();
                if (k.beta < m.upper) {
                    if (S.back().lo != k.beta) out.emplace_back("generalised (ii): b_n = beta when beta < r");
                    const double room = n == 1 ? k.beta - m.lower : k.beta - S[n - 2].hi;
                    if (!(k.delta > 0.0 && k.delta < room))
                        out.emplace_back("generalised (iii): 0 < delta < beta - l 1{n=1} - a_{n-1} 1{n>=2}");
                } else if (k.delta != 0.0) {
                    out.emplace_back("generalised (iii): delta = 0 when beta = r");
                }
                detail::check_rate(k.u, m.lower, k.beta, sample, out);
            }
        },
        s);
    return rep;
}

}  // namespace tisc
