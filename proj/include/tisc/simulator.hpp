#pragma once

#include "tisc/errors.hpp"
#include "tisc/model.hpp"
#include "tisc/rng.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace tisc {

struct SimConfig {
    double dt = 1e-3;
    /// Horizon; when unset, chosen so that exp(-q_min t_max) = 1e-6.
    std::optional<double> t_max;
    std::size_t n_paths = 1000;
    std::uint64_t seed = 1;
    /// Distance below a mild boundary inside which steps may be subdivided.
    double beta_guard = 0.2;
    /// Subdivide until u(x) h <= guard_fraction (beta - x) ...
    double guard_fraction = 0.25;
    /// ... and noise_sigmas sigma(x) sqrt(h) <= beta - x (0 disables the noise test).
    double noise_sigmas = 8.0;
    double rate_cap = 1e8;
    /// Paths are absorbed at l + absorption_rel (x_start - l).
    double absorption_rel = 1e-8;
    /// Smallest substep is dt 2^-max_halvings.
    int max_halvings = 40;
    /// Trapezoid rule for the running cost (generic stepper only); default is the left endpoint.
    bool trapezoid = false;
    /// simulate_path keeps every record_stride-th state.
    std::size_t record_stride = 1;
    /// Paths advanced together per batch.
    std::size_t batch = 128;
};

inline double default_horizon(double q_min) { return std::log(1e6) / q_min; }

inline void validate_config(const SimConfig& c) {
    if (!(c.dt > 0.0)) throw DomainError("SimConfig: dt must be > 0");
    if (c.t_max && !(*c.t_max > 0.0)) throw DomainError("SimConfig: t_max must be > 0");
    if (c.n_paths < 1) throw InsufficientDataError("SimConfig: n_paths must be >= 1");
    if (!(c.beta_guard > 0.0)) throw DomainError("SimConfig: beta_guard must be > 0");
    if (!(c.guard_fraction > 0.0 && c.guard_fraction < 1.0)) throw DomainError("SimConfig: guard_fraction in (0, 1)");
    if (!(c.rate_cap > 0.0)) throw DomainError("SimConfig: rate_cap must be > 0");
    if (c.record_stride < 1 || c.batch < 1) throw DomainError("SimConfig: record_stride and batch must be >= 1");
}

enum class JumpKind { Initial, Reflection, Region };

struct JumpEvent {
    double t;
    double size;
    JumpKind kind;
};

struct PathRecord {
    std::vector<double> times;
    std::vector<double> states;
    std::vector<double> control;     ///< D_t at each recorded time (D_{0-} = 0)
    std::vector<double> local_time;  ///< cumulative reflection increments at each recorded time
    std::vector<JumpEvent> jumps;    ///< initial and region jumps (reflection is in local_time)
    bool absorbed = false;
    double tau = kInf;  ///< absorption time, infinite when censored
    double max_state = -kInf;
    long beta_hits = 0;  ///< steps that reached a mild boundary and were pulled back
    long substeps = 0;
    double guard_fraction = 0, noise_sigmas = 0, rate_cap = 0, beta_guard = 0;
};

struct CostEstimate {
    double estimate = 0;
    double se = 0;  ///< sample std / sqrt(n_paths)
    std::size_t n_paths = 0;
    double censoring_fraction = 0;    ///< paths still alive at t_max
    double censoring_bias_bound = 0;  ///< exp(-q t_max) f(max state) / q
};

// ---------------------------------------------------------------------------
// Scalar stepping shared by every simulation path.

/// Mutable state of one simulated path.
struct LaneState {
    double x = 0;
    bool alive = true;
    double cutoff = -kInf;
    double max_state = -kInf;
    long substeps = 0;
    long beta_hits = 0;
};

class PathStepper {
public:
    PathStepper(const DiffusionModel& model, const ThresholdStrategy& strat, const SimConfig& cfg)
        : m_(model), cfg_(cfg), S_(strong_region(strat, model)), u_(rate_of(strat)) {
        std::visit(
            [this](const auto& k) {
                using T = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<T, StrongThreshold>) {
                    beta_ = m_.upper;
                } else {
                    beta_ = k.beta;
                    delta_ = k.delta;
                }
            },
            strat);
        std::sort(S_.begin(), S_.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
        split_ = !u_.is_zero();
    }

    double beta() const { return beta_; }
    bool mild_boundary() const { return beta_ < m_.upper; }

    /// Applies the time-0 jump and returns the starting state. Throws for x0 outside (l, r).
    template <class Sink>
    double start(double x0, Sink& sink) const {
        if (!m_.contains(x0)) throw DomainError("simulate: x0 outside (lower, upper)");
        for (std::size_t i = 0; i < S_.size(); ++i) {
            const auto& iv = S_[i];
            if (x0 >= iv.lo && x0 <= iv.hi) {
                const bool top_mild = i + 1 == S_.size() && mild_boundary() && iv.lo == beta_;
                const double target = top_mild ? beta_ - delta_ : iv.lo;
                if (x0 - target > 0.0) sink.jump(0.0, x0 - target, JumpKind::Initial);
                return target;
            }
        }
        return x0;
    }

    LaneState init_lane(double x_start) const {
        LaneState s;
        s.x = x_start;
        s.max_state = x_start;
        if (std::isfinite(m_.lower)) s.cutoff = m_.lower + cfg_.absorption_rel * (x_start - m_.lower);
        return s;
    }

    /// Advances one step of length h from time t driven by the standard normal z.
    /// Inside the guard band of a mild boundary the step is subdivided along a Brownian bridge.
    /// Without a control rate this is Euler with projection. With one, each (sub)step is the splitting
    /// half rate flow, Milstein diffusion, half rate flow: weak order 2 when mu = 0, where left-point
    /// Euler leaves an O(dt) bias of several standard errors at 1e5 paths.
    template <class Sink>
    void step(LaneState& st, double t, double h, double z, Xoshiro256ss& bridge, Sink& sink) const {
        if (!st.alive) return;
        boost::random::normal_distribution<double> normal;
        double T = h, W = std::sqrt(h) * z, tt = t;
        const double h_min = std::ldexp(h, -cfg_.max_halvings);
        while (true) {
            const Gap g = gap_of(st.x);
            const double x = st.x;
            const double ux = std::min(u_(x), cfg_.rate_cap);
            const double sx = m_.sigma(x);
            double hs = T;
            if (g.upper_mild && g.upper - x < cfg_.beta_guard) {
                const double room = g.upper - x;
                while (hs > h_min && (ux * hs > cfg_.guard_fraction * room ||
                                      cfg_.noise_sigmas * sx * std::sqrt(hs) > room))
                    hs *= 0.5;
            }
            const bool last = hs >= T * (1.0 - 1e-12);
            if (last) hs = T;
            const double dW = last ? W : (hs / T) * W + std::sqrt(hs * (T - hs) / T) * normal(bridge);
            ++st.substeps;
            double xn;
            if (split_) {
                const double x1 = rate_flow(x, tt, 0.5 * hs, g, sink);
                double x2 = x1 + m_.mu(x1) * hs + m_.sigma(x1) * dW + 0.5 * sigma_slope(x1) * (dW * dW - hs);
                if (g.upper_mild && x2 >= g.upper) {
                    ++st.beta_hits;
                    x2 = 0.5 * (x1 + g.upper);
                }
                xn = rate_flow(x2, tt + 0.5 * hs, 0.5 * hs, g, sink);
            } else {
                xn = x + (m_.mu(x) - ux) * hs + sx * dW;
                sink.run(tt, hs, x, xn, ux);
            }

            if (g.has_upper) {
                if (!g.upper_mild && xn > g.upper) {
                    sink.jump(tt, xn - g.upper, JumpKind::Reflection);
                    xn = g.upper;
                } else if (g.upper_mild && xn >= g.upper) {
                    ++st.beta_hits;
                    xn = 0.5 * (x + g.upper);
                }
            }
            if (g.has_lower_region && xn <= g.lower_hi) {
                const double size = g.lower_hi - g.lower_lo;
                if (size > 0.0) sink.jump(tt, size, JumpKind::Region);
                xn -= size;
            }
            st.x = xn;
            st.max_state = std::max(st.max_state, xn);
            if (xn <= st.cutoff) {
                st.alive = false;
                st.x = m_.lower;
                sink.absorb(tt + hs);
                return;
            }
            W -= dW;
            T -= hs;
            tt += hs;
            if (last) return;
        }
    }

private:
    struct Gap {
        bool has_upper = false;
        double upper = kInf;
        bool upper_mild = false;
        bool has_lower_region = false;
        double lower_lo = 0, lower_hi = 0;
    };

    /// sigma(x) sigma'(x); exact for GBM, central difference otherwise.
    double sigma_slope(double x) const {
        if (m_.gbm_sigma) return *m_.gbm_sigma * *m_.gbm_sigma * x;
        const double e = 1e-6 * std::max(1.0, std::abs(x));
        return m_.sigma(x) * (m_.sigma(x + e) - m_.sigma(x - e)) / (2.0 * e);
    }

    /// Flow of x' = -u(x) for time tau from clock t by midpoint RK2. The running cost is booked at the
    /// midpoint and the control at the distance pushed. Pieces are halved while u tau exceeds
    /// guard_fraction of the room below a mild boundary.
    template <class Sink>
    double rate_flow(double x, double t, double tau, const Gap& g, Sink& sink) const {
        double left = tau;
        while (left > 0.0) {
            double piece = left;
            if (g.upper_mild) {
                const double ux = std::min(u_(x), cfg_.rate_cap);
                const double floor = std::ldexp(tau, -cfg_.max_halvings);
                while (piece > floor && ux * piece > cfg_.guard_fraction * (g.upper - x)) piece *= 0.5;
            }
            const double xm = x - 0.5 * piece * std::min(u_(x), cfg_.rate_cap);
            const double xn = x - piece * std::min(u_(xm), cfg_.rate_cap);
            sink.flow(t + 0.5 * piece, piece, xm, x - xn);
            x = xn;
            t += piece;
            left -= piece;
        }
        return x;
    }

    /// Strong intervals adjacent to x (x is never inside one except at a lower edge).
    Gap gap_of(double x) const {
        Gap g;
        for (std::size_t i = 0; i < S_.size(); ++i) {
            const auto& iv = S_[i];
            if (iv.lo >= x) {
                g.has_upper = true;
                g.upper = iv.lo;
                g.upper_mild = i + 1 == S_.size() && mild_boundary() && iv.lo == beta_;
                if (i > 0) {
                    g.has_lower_region = true;
                    g.lower_lo = S_[i - 1].lo;
                    g.lower_hi = S_[i - 1].hi;
                }
                return g;
            }
        }
        if (!S_.empty()) {
            g.has_lower_region = true;
            g.lower_lo = S_.back().lo;
            g.lower_hi = S_.back().hi;
        }
        return g;
    }

    const DiffusionModel& m_;
    const SimConfig& cfg_;
    std::vector<Interval> S_;
    RateFunction u_;
    double beta_ = kInf;
    double delta_ = 0;
    bool split_ = false;
};

// ---------------------------------------------------------------------------
// Single path with full record.

namespace detail {

struct RecordSink {
    PathRecord* rec;
    double D = 0, L = 0;
    void run(double, double h, double, double, double u) { D += u * h; }
    void flow(double, double, double, double push) { D += push; }
    void jump(double t, double size, JumpKind kind) {
        D += size;
        if (kind == JumpKind::Reflection) L += size;
        else rec->jumps.push_back({t, size, kind});
    }
    void absorb(double) {}
};

}  // namespace detail

/// One controlled trajectory on the grid t_n = n dt, n <= ceil(t_max / dt). Main normals come from
/// stream (seed, path_index, 0), bridge normals from (seed, path_index, 1); path k of an ensemble
/// with one start point sees the same normals.
inline PathRecord simulate_path(const DiffusionModel& model, const ThresholdStrategy& strat, double x0,
                                const SimConfig& cfg, std::uint64_t path_index = 0) {
    validate_config(cfg);
    const double t_max = cfg.t_max ? *cfg.t_max : 10.0;
    PathStepper stepper(model, strat, cfg);
    PathRecord rec;
    rec.guard_fraction = cfg.guard_fraction;
    rec.noise_sigmas = cfg.noise_sigmas;
    rec.rate_cap = cfg.rate_cap;
    rec.beta_guard = cfg.beta_guard;
    detail::RecordSink sink{&rec};
    const double xs = stepper.start(x0, sink);
    LaneState st = stepper.init_lane(xs);
    const std::uint64_t main_seed = stream_seed(cfg.seed, path_index, 0);
    NormalLanes gen(std::span<const std::uint64_t>(&main_seed, 1));
    Xoshiro256ss bridge(stream_seed(cfg.seed, path_index, 1));
    auto record = [&](double t) {
        rec.times.push_back(t);
        rec.states.push_back(st.x);
        rec.control.push_back(sink.D);
        rec.local_time.push_back(sink.L);
    };
    record(0.0);
    const auto steps = static_cast<std::size_t>(std::ceil(t_max / cfg.dt - 1e-9));
    for (std::size_t n = 0; n < steps && st.alive; ++n) {
        const double t = static_cast<double>(n) * cfg.dt;
        double z = 0.0;
        gen.next(&z);
        stepper.step(st, t, cfg.dt, z, bridge, sink);
        if (!st.alive) {
            rec.absorbed = true;
            // absorption time is inside the step; record the terminal state at the step end
            rec.tau = t + cfg.dt;
            record(t + cfg.dt);
            break;
        }
        if ((n + 1) % cfg.record_stride == 0 || n + 1 == steps) record(t + cfg.dt);
    }
    rec.max_state = std::max(st.max_state, xs);
    rec.beta_hits = st.beta_hits;
    rec.substeps = st.substeps;
    return rec;
}

// ---------------------------------------------------------------------------
// Ensembles: several starting points and discount rates on common random numbers.

struct EnsembleResult {
    std::vector<double> x0;
    std::vector<double> rates;
    std::vector<double> weights;
    std::vector<std::vector<CostEstimate>> w;  ///< [start point][rate]
    std::vector<CostEstimate> J;               ///< [start point], weighted per path
    double dt = 0, t_max = 0;
    bool vectorised = false;
    long beta_hits = 0;
    long absorbed = 0;
    double max_state = -kInf;
};

namespace detail {

/// Structure-of-arrays state for K start points x B paths; lane = k B + j.
struct Lanes {
    std::size_t K = 0, B = 0, Q = 0;
    std::vector<double> x, alive, max_state, cutoff, flag;
    std::vector<std::vector<double>> run, sing;  ///< [rate][lane]
    std::vector<Xoshiro256ss> bridge;
    long beta_hits = 0, substeps = 0;

    void reset(std::size_t k, std::size_t b, std::size_t q) {
        K = k;
        B = b;
        Q = q;
        const std::size_t n = K * B;
        x.assign(n, 0.0);
        alive.assign(n, 1.0);
        max_state.assign(n, -kInf);
        cutoff.assign(n, -kInf);
        flag.assign(n, 0.0);
        run.assign(Q, std::vector<double>(n, 0.0));
        sing.assign(Q, std::vector<double>(n, 0.0));
        bridge.clear();
        beta_hits = substeps = 0;
    }
    double value(std::size_t q, std::size_t lane) const { return run[q][lane] + sing[q][lane]; }
};

/// Discounted cost accumulation for one lane.
struct LaneSink {
    Lanes* L;
    std::size_t lane;
    std::span<const double> rates;
    const RunningCost* cost;
    bool trapezoid;

    void run(double t, double h, double x, double xn, double u) {
        const double f = trapezoid ? 0.5 * ((*cost)(x) + (*cost)(xn)) : (*cost)(x);
        for (std::size_t q = 0; q < rates.size(); ++q) L->run[q][lane] += std::exp(-rates[q] * t) * (f + u) * h;
    }
    void flow(double t, double tau, double xm, double push) {
        const double c = (*cost)(xm) * tau + push;
        for (std::size_t q = 0; q < rates.size(); ++q) L->run[q][lane] += std::exp(-rates[q] * t) * c;
    }
    void jump(double t, double size, JumpKind) {
        for (std::size_t q = 0; q < rates.size(); ++q) L->sing[q][lane] += std::exp(-rates[q] * t) * size;
    }
    void absorb(double tau) {
        for (std::size_t q = 0; q < rates.size(); ++q)
            L->sing[q][lane] += std::exp(-rates[q] * tau) * cost->f_at_l / rates[q];
    }
};

enum class FastKind { None, Strong, Mild };

/// Parameters of the vectorised GBM kernels.
struct FastParams {
    double sigma = 0;
    double b = 0;  ///< reflection level (strong)
    RationalRate r;
    double guard_lo = kInf;  ///< lanes at or above are stepped by PathStepper (mild)
};

/// One Euler step with projection at b for lanes [lo, lo + n) sharing normals z[0..n). Flags freshly
/// absorbed lanes with 2 and returns their number. Branch-free so it vectorises.
template <int Q>
inline long fast_step_strong(Lanes& L, std::size_t lo, std::size_t n, const double* __restrict z, double h,
                             const double* e, const FastParams& P) {
    double* __restrict x = L.x.data() + lo;
    double* __restrict alive = L.alive.data() + lo;
    double* __restrict mx = L.max_state.data() + lo;
    double* __restrict flag = L.flag.data() + lo;
    const double* __restrict cut = L.cutoff.data() + lo;
    double* __restrict r0 = L.run[0].data() + lo;
    double* __restrict s0 = L.sing[0].data() + lo;
    double* __restrict r1 = Q > 1 ? L.run[1].data() + lo : r0;
    double* __restrict s1 = Q > 1 ? L.sing[1].data() + lo : s0;
    const double e0h = e[0] * h, e1h = Q > 1 ? e[1] * h : 0.0;
    const double e0 = e[0], e1 = Q > 1 ? e[1] : 0.0;
    const double sq = std::sqrt(h) * P.sigma;
    long flagged = 0;
#pragma GCC ivdep
    for (std::size_t j = 0; j < n; ++j) {
        const double xv = x[j];
        const double active = alive[j];
        const double c = 0.5 * xv * xv;
        r0[j] += active * e0h * c;
        if constexpr (Q > 1) r1[j] += active * e1h * c;
        double xn = xv + sq * xv * z[j];
        const double over = xn > P.b ? xn - P.b : 0.0;
        s0[j] += active * e0 * over;
        if constexpr (Q > 1) s1[j] += active * e1 * over;
        xn -= over;
        const double absorbed = (xn <= cut[j] ? 1.0 : 0.0) * active;
        flag[j] = 2.0 * absorbed;
        xn = active > 0.0 ? xn : xv;
        x[j] = xn;
        mx[j] = xn > mx[j] ? xn : mx[j];
        flagged += flag[j] != 0.0;
    }
    return flagged;
}

/// Split step of PathStepper (half rate flow, Milstein GBM, half rate flow) for lanes below the guard
/// band. Each half flow is the second-order Taylor step y - tau u + tau^2 u u' / 2, which agrees with
/// the scalar midpoint step to O(tau^3) and needs one division. ea, eb are the discount factors at
/// t + h/4 and t + 3h/4. Lanes that start in the guard band or whose diffusion step lands in it are
/// left untouched and flagged 1, so the scalar stepper redoes the whole step with the same normal;
/// freshly absorbed lanes are flagged 2. Returns the flagged count.
template <int Q>
inline long fast_step_mild(Lanes& L, std::size_t lo, std::size_t n, const double* __restrict z, double h,
                           const double* ea, const double* eb, const FastParams& P) {
    double* __restrict x = L.x.data() + lo;
    double* __restrict alive = L.alive.data() + lo;
    double* __restrict mx = L.max_state.data() + lo;
    double* __restrict flag = L.flag.data() + lo;
    const double* __restrict cut = L.cutoff.data() + lo;
    double* __restrict r0 = L.run[0].data() + lo;
    double* __restrict r1 = Q > 1 ? L.run[1].data() + lo : r0;
    const double hh = 0.5 * h, hq = 0.25 * h;
    const double sq = std::sqrt(h), s = P.sigma, s2h = P.sigma * P.sigma * h;
    const double p2 = P.r.p2, p1 = P.r.p1, p0 = P.r.p0, d1 = P.r.d1, d0 = P.r.d0;
    const double start = P.r.start, cap = P.r.cap, near_pole = P.r.pole - P.r.cap_band;
    const double guard_lo = P.guard_lo;
    const double ea0 = ea[0], eb0 = eb[0], ea1 = Q > 1 ? ea[1] : 0.0, eb1 = Q > 1 ? eb[1] : 0.0;
    // half flow from y; u and u' follow the scalar cap rules, as selects. Returns the end point and
    // sets the midpoint used for the running cost.
    auto half = [=](double y, double& mid) {
        const double inv = 1.0 / (d1 * y + d0);
        const double raw = ((p2 * y + p1) * y + p0) * inv;
        const double draw = (2.0 * p2 * y + p1 - raw * d1) * inv;
        const bool free = y < near_pole && raw < cap;
        const bool on = y >= start;
        const double u = on ? (free ? raw : cap) : 0.0;
        const double du = on && free ? draw : 0.0;
        mid = y - hq * u;
        return y - hh * u + 0.5 * hh * hh * u * du;
    };
    long flagged = 0;
#pragma GCC ivdep
    for (std::size_t j = 0; j < n; ++j) {
        const double xv = x[j];
        double m1, m2;
        const double x1 = half(xv, m1);
        const double dz = sq * z[j];
        const double x2 = x1 * (1.0 + s * dz + 0.5 * (s * s * dz * dz - s2h));
        const double guard = xv >= guard_lo || x2 >= guard_lo ? 1.0 : 0.0;
        const double active = alive[j] * (1.0 - guard);
        const double x3 = half(x2, m2);
        const double ca = hh * 0.5 * m1 * m1 + (xv - x1);
        const double cb = hh * 0.5 * m2 * m2 + (x2 - x3);
        r0[j] += active * (ea0 * ca + eb0 * cb);
        if constexpr (Q > 1) r1[j] += active * (ea1 * ca + eb1 * cb);
        const double absorbed = (x3 <= cut[j] ? 1.0 : 0.0) * active;
        const double fl = guard * alive[j] + 2.0 * absorbed;
        flag[j] = fl;
        const double xn = active > 0.0 ? x3 : xv;
        x[j] = xn;
        mx[j] = xn > mx[j] ? xn : mx[j];
        flagged += fl != 0.0;
    }
    return flagged;
}

class EnsembleRunner {
public:
    EnsembleRunner(const DiffusionModel& model, const ThresholdStrategy& strat, std::span<const double> x0,
                   std::span<const double> rates, const RunningCost& cost, const SimConfig& cfg)
        : model_(model), strat_(strat), x0_(x0.begin(), x0.end()), rates_(rates.begin(), rates.end()),
          cost_(cost), cfg_(cfg), stepper_(model_, strat_, cfg_) {
        pick_kernel();
    }

    bool vectorised() const { return kind_ != FastKind::None; }

    /// Sets up lanes for paths [p0, p0 + nb); jump costs at time 0 go into `sing`.
    void init(Lanes& L, std::size_t p0, std::size_t nb, std::uint64_t stream_base) const {
        L.reset(x0_.size(), nb, rates_.size());
        L.bridge.reserve(L.K * nb);
        for (std::size_t k = 0; k < L.K; ++k)
            for (std::size_t j = 0; j < nb; ++j) {
                const std::size_t lane = k * nb + j;
                LaneSink sink{&L, lane, rates_, &cost_, cfg_.trapezoid};
                const double xs = stepper_.start(x0_[k], sink);
                const LaneState st = stepper_.init_lane(xs);
                L.x[lane] = st.x;
                L.cutoff[lane] = st.cutoff;
                L.max_state[lane] = st.x;
                L.bridge.emplace_back(stream_seed(cfg_.seed, p0 + j, stream_base + k));
            }
    }

    /// Advances every lane by h from time t; z holds one normal per path.
    void advance(Lanes& L, const double* z, double t, double h) const {
        const std::size_t nb = L.B;
        if (kind_ == FastKind::None) {
            for (std::size_t k = 0; k < L.K; ++k)
                for (std::size_t j = 0; j < nb; ++j) scalar_step(L, k * nb + j, t, h, z[j]);
            return;
        }
        const bool two = rates_.size() > 1;
        auto disc = [&](double s, double* e) {
            e[0] = std::exp(-rates_[0] * s);
            e[1] = two ? std::exp(-rates_[1] * s) : 0.0;
        };
        double e[2], ea[2], eb[2];
        if (kind_ == FastKind::Strong) {
            disc(t, e);
        } else {
            disc(t + 0.25 * h, ea);
            disc(t + 0.75 * h, eb);
        }
        for (std::size_t k = 0; k < L.K; ++k) {
            const std::size_t lo = k * nb;
            long flagged = 0;
            if (kind_ == FastKind::Strong)
                flagged = two ? fast_step_strong<2>(L, lo, nb, z, h, e, fp_) : fast_step_strong<1>(L, lo, nb, z, h, e, fp_);
            else
                flagged = two ? fast_step_mild<2>(L, lo, nb, z, h, ea, eb, fp_)
                              : fast_step_mild<1>(L, lo, nb, z, h, ea, eb, fp_);
            if (flagged == 0) continue;
            for (std::size_t j = 0; j < nb; ++j) {
                const std::size_t lane = lo + j;
                const double f = L.flag[lane];
                if (f == 1.0) {
                    scalar_step(L, lane, t, h, z[j]);
                } else if (f == 2.0) {
                    L.alive[lane] = 0.0;
                    L.x[lane] = model_.lower;
                    LaneSink sink{&L, lane, rates_, &cost_, cfg_.trapezoid};
                    sink.absorb(t + h);
                }
            }
        }
    }

    const PathStepper& stepper() const { return stepper_; }

private:
    void pick_kernel() {
        kind_ = FastKind::None;
        if (!model_.gbm_sigma || !cost_.quadratic || cfg_.trapezoid || rates_.empty() || rates_.size() > 2) return;
        fp_.sigma = *model_.gbm_sigma;
        if (const auto* s = std::get_if<StrongThreshold>(&strat_)) {
            fp_.b = s->b;
            kind_ = FastKind::Strong;
        } else if (const auto* m = std::get_if<MildThreshold>(&strat_)) {
            const RationalRate* r = m->u.as_rational();
            if (!r || r->pole != m->beta) return;
            fp_.r = *r;
            fp_.r.cap = std::min(r->cap, cfg_.rate_cap);
            fp_.guard_lo = m->beta - cfg_.beta_guard;
            kind_ = FastKind::Mild;
        }
    }

    void scalar_step(Lanes& L, std::size_t lane, double t, double h, double z) const {
        LaneState st;
        st.x = L.x[lane];
        st.alive = L.alive[lane] != 0.0;
        st.cutoff = L.cutoff[lane];
        st.max_state = L.max_state[lane];
        LaneSink sink{&L, lane, rates_, &cost_, cfg_.trapezoid};
        stepper_.step(st, t, h, z, L.bridge[lane], sink);
        L.x[lane] = st.x;
        L.alive[lane] = st.alive ? 1.0 : 0.0;
        L.max_state[lane] = st.max_state;
        L.beta_hits += st.beta_hits;
        L.substeps += st.substeps;
    }

    DiffusionModel model_;
    ThresholdStrategy strat_;
    std::vector<double> x0_;
    std::vector<double> rates_;
    RunningCost cost_;
    SimConfig cfg_;
    PathStepper stepper_;
    FastKind kind_ = FastKind::None;
    FastParams fp_;
};

struct Moments {
    double sum = 0, sumsq = 0;
    void add(double v) {
        sum += v;
        sumsq += v * v;
    }
    CostEstimate estimate(std::size_t n) const {
        CostEstimate c;
        c.n_paths = n;
        c.estimate = sum / static_cast<double>(n);
        const double var = n > 1 ? std::max(0.0, (sumsq - sum * c.estimate) / static_cast<double>(n - 1)) : 0.0;
        c.se = std::sqrt(var / static_cast<double>(n));
        return c;
    }
};

inline void check_inputs(std::span<const double> x0, std::span<const double> rates, std::span<const double> weights) {
    if (x0.empty()) throw InsufficientDataError("simulate: no starting points");
    if (rates.empty() || rates.size() != weights.size()) throw DomainError("simulate: rates/weights mismatch");
    for (double q : rates)
        if (!(q > 0.0)) throw DomainError("simulate: discount rates must be > 0");
}

}  // namespace detail

/// Monte Carlo values of w(x0; q) for every start point and rate on common random numbers, and
/// J(x0) = sum_k weights_k w(x0; q_k) per path. Reduction order is fixed by path index.
inline EnsembleResult simulate_ensemble(const DiffusionModel& model, const ThresholdStrategy& strat,
                                        std::span<const double> x0, std::span<const double> rates,
                                        std::span<const double> weights, const RunningCost& cost,
                                        const SimConfig& cfg) {
    validate_config(cfg);
    detail::check_inputs(x0, rates, weights);
    const double q_min = *std::min_element(rates.begin(), rates.end());
    const double t_max = cfg.t_max ? *cfg.t_max : default_horizon(q_min);
    const auto steps = static_cast<std::size_t>(std::ceil(t_max / cfg.dt - 1e-9));
    const std::size_t K = x0.size(), Q = rates.size();

    detail::EnsembleRunner runner(model, strat, x0, rates, cost, cfg);
    std::vector<std::vector<detail::Moments>> mw(K, std::vector<detail::Moments>(Q));
    std::vector<detail::Moments> mj(K);
    std::vector<std::size_t> alive_end(K, 0);
    std::vector<double> max_state(K, -kInf);
    EnsembleResult res;
    res.vectorised = runner.vectorised();

    detail::Lanes L;
    NormalLanes gens;
    std::vector<std::uint64_t> seeds;
    std::vector<double> z;
    for (std::size_t p0 = 0; p0 < cfg.n_paths; p0 += cfg.batch) {
        const std::size_t nb = std::min(cfg.batch, cfg.n_paths - p0);
        runner.init(L, p0, nb, 1);
        seeds.clear();
        for (std::size_t j = 0; j < nb; ++j) seeds.push_back(stream_seed(cfg.seed, p0 + j, 0));
        gens.reset(seeds);
        z.assign(nb, 0.0);
        for (std::size_t n = 0; n < steps; ++n) {
            gens.next(z.data());
            runner.advance(L, z.data(), static_cast<double>(n) * cfg.dt, cfg.dt);
        }
        for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t k = 0; k < K; ++k) {
                const std::size_t lane = k * nb + j;
                double vj = 0.0;
                for (std::size_t q = 0; q < Q; ++q) {
                    const double v = L.value(q, lane);
                    mw[k][q].add(v);
                    vj += weights[q] * v;
                }
                mj[k].add(vj);
                if (L.alive[lane] != 0.0) ++alive_end[k];
                else ++res.absorbed;
                max_state[k] = std::max(max_state[k], L.max_state[lane]);
            }
        res.beta_hits += L.beta_hits;
    }

    res.x0.assign(x0.begin(), x0.end());
    res.rates.assign(rates.begin(), rates.end());
    res.weights.assign(weights.begin(), weights.end());
    res.dt = cfg.dt;
    res.t_max = static_cast<double>(steps) * cfg.dt;
    res.w.assign(K, {});
    for (std::size_t k = 0; k < K; ++k) {
        const double cens = static_cast<double>(alive_end[k]) / static_cast<double>(cfg.n_paths);
        const double fmax = std::isfinite(max_state[k]) ? cost(max_state[k]) : kInf;
        double bias_j = 0.0;
        for (std::size_t q = 0; q < Q; ++q) {
            CostEstimate c = mw[k][q].estimate(cfg.n_paths);
            c.censoring_fraction = cens;
            c.censoring_bias_bound = std::exp(-rates[q] * res.t_max) * fmax / rates[q];
            bias_j += weights[q] * c.censoring_bias_bound;
            res.w[k].push_back(c);
        }
        CostEstimate cj = mj[k].estimate(cfg.n_paths);
        cj.censoring_fraction = cens;
        cj.censoring_bias_bound = bias_j;
        res.J.push_back(cj);
        res.max_state = std::max(res.max_state, max_state[k]);
    }
    return res;
}

inline CostEstimate estimate_w(const DiffusionModel& model, const ThresholdStrategy& strat, double x0, double q,
                               const RunningCost& cost, const SimConfig& cfg) {
    const double xs[] = {x0}, qs[] = {q}, ws[] = {1.0};
    return simulate_ensemble(model, strat, xs, qs, ws, cost, cfg).w[0][0];
}

struct JEstimate {
    std::vector<CostEstimate> per_atom;
    CostEstimate J;
};

/// All atoms share one path ensemble, so J is coherent with the per-atom estimates.
inline JEstimate estimate_J(const DiffusionModel& model, const ThresholdStrategy& strat, double x0,
                            const WeightedDiscount& disc, const RunningCost& cost, const SimConfig& cfg) {
    std::vector<double> qs, ws;
    for (const auto& a : disc.atoms()) {
        qs.push_back(a.q);
        ws.push_back(a.p);
    }
    const double xs[] = {x0};
    auto r = simulate_ensemble(model, strat, xs, qs, ws, cost, cfg);
    return {r.w[0], r.J[0]};
}

// ---------------------------------------------------------------------------
// Step-size sensitivity on coupled paths.

struct HalvingReport {
    std::vector<std::vector<double>> shift;     ///< [start][rate] mean(fine - coarse)
    std::vector<std::vector<double>> shift_se;  ///< standard error of that mean
    std::size_t n_paths = 0;
    double dt = 0;
};

/// Runs dt and dt/2 on the same Brownian paths: the fine run uses z1, z2 per coarse step, the coarse
/// run (z1 + z2)/sqrt 2. Streams are disjoint from simulate_ensemble's for the same seed.
inline HalvingReport halving_check(const DiffusionModel& model, const ThresholdStrategy& strat,
                                   std::span<const double> x0, std::span<const double> rates, const RunningCost& cost,
                                   const SimConfig& cfg, std::size_t n_paths) {
    validate_config(cfg);
    const std::vector<double> unit_weights(rates.size(), 1.0);
    detail::check_inputs(x0, rates, unit_weights);
    if (n_paths < 2) throw InsufficientDataError("halving_check: n_paths must be >= 2");
    const double q_min = *std::min_element(rates.begin(), rates.end());
    const double t_max = cfg.t_max ? *cfg.t_max : default_horizon(q_min);
    const auto steps = static_cast<std::size_t>(std::ceil(t_max / cfg.dt - 1e-9));
    const std::size_t K = x0.size(), Q = rates.size();
    const std::uint64_t base = 0x4000;  // stream ids for this check

    detail::EnsembleRunner runner(model, strat, x0, rates, cost, cfg);
    std::vector<std::vector<detail::Moments>> md(K, std::vector<detail::Moments>(Q));
    detail::Lanes coarse, fine;
    NormalLanes gens;
    std::vector<std::uint64_t> seeds;
    std::vector<double> z1, z2, zc;
    const double h = cfg.dt, hf = 0.5 * cfg.dt, rs2 = 1.0 / std::sqrt(2.0);
    for (std::size_t p0 = 0; p0 < n_paths; p0 += cfg.batch) {
        const std::size_t nb = std::min(cfg.batch, n_paths - p0);
        runner.init(coarse, p0, nb, base + 1);
        runner.init(fine, p0, nb, base + 1 + K);
        seeds.clear();
        for (std::size_t j = 0; j < nb; ++j) seeds.push_back(stream_seed(cfg.seed, p0 + j, base));
        gens.reset(seeds);
        z1.assign(nb, 0.0);
        z2.assign(nb, 0.0);
        zc.assign(nb, 0.0);
        for (std::size_t n = 0; n < steps; ++n) {
            gens.next(z1.data());
            gens.next(z2.data());
            for (std::size_t j = 0; j < nb; ++j) zc[j] = (z1[j] + z2[j]) * rs2;
            const double t = static_cast<double>(n) * h;
            runner.advance(coarse, zc.data(), t, h);
            runner.advance(fine, z1.data(), t, hf);
            runner.advance(fine, z2.data(), t + hf, hf);
        }
        for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t q = 0; q < Q; ++q)
                    md[k][q].add(fine.value(q, k * nb + j) - coarse.value(q, k * nb + j));
    }
    HalvingReport rep;
    rep.n_paths = n_paths;
    rep.dt = cfg.dt;
    rep.shift.assign(K, std::vector<double>(Q));
    rep.shift_se.assign(K, std::vector<double>(Q));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t q = 0; q < Q; ++q) {
            const auto c = md[k][q].estimate(n_paths);
            rep.shift[k][q] = c.estimate;
            rep.shift_se[k][q] = c.se;
        }
    return rep;
}

// ---------------------------------------------------------------------------
// Limit of the cost as the initial jump offset delta shrinks.

struct DeltaProbe {
    std::vector<double> deltas;
    std::vector<CostEstimate> estimates;
    double extrapolated = 0;  ///< intercept of the weighted polynomial fit in delta
    double extrapolated_se = 0;
    double slope = 0;
    double curvature = 0;  ///< delta^2 coefficient; zero when fewer than 3 deltas
};

/// Estimates w(x0; q) for each delta of a strictly decreasing ladder on common random numbers and
/// fits estimate = c0 + c1 delta + c2 delta^2 by inverse-variance weighted least squares (c2 = 0 for
/// two deltas). The quadratic term is needed: with smooth fit at beta the linear term nearly cancels.
/// The SE treats the estimates as independent.
inline DeltaProbe delta_limit_probe(const DiffusionModel& model, const MildThreshold& base,
                                    std::span<const double> ladder, double x0, double q, const RunningCost& cost,
                                    const SimConfig& cfg) {
    if (ladder.empty()) throw InsufficientDataError("delta_limit_probe: empty ladder");
    for (std::size_t i = 1; i < ladder.size(); ++i)
        if (!(ladder[i] < ladder[i - 1])) throw DomainError("delta_limit_probe: ladder must be strictly decreasing");
    if (!(x0 >= base.beta)) throw DomainError("delta_limit_probe: x0 must be >= beta");
    DeltaProbe out;
    for (double d : ladder) {
        if (!(d > 0.0)) throw DomainError("delta_limit_probe: delta must be > 0");
        MildThreshold s = base;
        s.delta = d;
        out.deltas.push_back(d);
        out.estimates.push_back(estimate_w(model, s, x0, q, cost, cfg));
    }
    const std::size_t n = ladder.size();
    if (n == 1) {
        out.extrapolated = out.estimates[0].estimate;
        out.extrapolated_se = out.estimates[0].se;
        return out;
    }
    const std::size_t p = n >= 3 ? 3 : 2;
    // normal equations N c = r with N = X^T W X
    double N[3][3] = {}, r[3] = {};
    for (std::size_t i = 0; i < n; ++i) {
        const double se = std::max(out.estimates[i].se, 1e-300);
        const double w = 1.0 / (se * se);
        const double d = out.deltas[i], pw[3] = {1.0, d, d * d};
        for (std::size_t a = 0; a < p; ++a) {
            r[a] += w * pw[a] * out.estimates[i].estimate;
            for (std::size_t b = 0; b < p; ++b) N[a][b] += w * pw[a] * pw[b];
        }
    }
    // Gauss-Jordan on [N | I | r]; N is symmetric positive definite for distinct deltas
    double A[3][7] = {};
    for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t b = 0; b < p; ++b) A[a][b] = N[a][b];
        A[a][p + a] = 1.0;
        A[a][2 * p] = r[a];
    }
    for (std::size_t k = 0; k < p; ++k) {
        const double piv = A[k][k];
        if (!(std::abs(piv) > 0.0)) throw NumericalError("delta_limit_probe: singular fit");
        for (std::size_t c = 0; c <= 2 * p; ++c) A[k][c] /= piv;
        for (std::size_t a = 0; a < p; ++a) {
            if (a == k) continue;
            const double f = A[a][k];
            for (std::size_t c = 0; c <= 2 * p; ++c) A[a][c] -= f * A[k][c];
        }
    }
    out.extrapolated = A[0][2 * p];
    out.slope = A[1][2 * p];
    out.curvature = p == 3 ? A[2][2 * p] : 0.0;
    out.extrapolated_se = std::sqrt(A[0][p]);
    return out;
}

}  // namespace tisc
