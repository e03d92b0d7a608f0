#include "tisc/mild_case.hpp"
#include "tisc/rng.hpp"
#include "tisc/simulator.hpp"
#include "tisc/strong_case.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

using namespace tisc;

namespace {

const StrongCandidate& strong04() {
    static const StrongCandidate c = build_strong(0.16, 0.2, 0.4);
    return c;
}

const MildCandidate& mild3() {
    static const MildCandidate m = build_mild(0.16, 0.2, 3.0).candidate;
    return m;
}

DiffusionModel gbm() { return DiffusionModel::gbm(0.4); }

// Same dynamics as gbm() but without the flag that selects the vectorised kernel.
DiffusionModel gbm_generic() {
    return DiffusionModel::general([](double) { return 0.0; }, [](double x) { return 0.4 * x; }, 0.0, kInf);
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Rng, LogUnitAccuracy) {
    for (double u = 0x1.0p-53; u < 1.0; u *= 1.37)
        EXPECT_NEAR(detail::log_unit(u), std::log(u), 4e-16 * std::abs(std::log(u)));
    EXPECT_EQ(detail::log_unit(1.0), 0.0);
}

TEST(Rng, SinCosTurnAccuracy) {
    for (double t = -0.5; t <= 0.5; t += 1.0 / 1024.0 + 1e-7) {
        double c, s;
        detail::sincos_turn(t, c, s);
        EXPECT_NEAR(c, std::cos(2.0 * std::numbers::pi * t), 1e-15);
        EXPECT_NEAR(s, std::sin(2.0 * std::numbers::pi * t), 1e-15);
    }
}

TEST(Rng, NormalLanesMoments) {
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t j = 0; j < 64; ++j) seeds.push_back(stream_seed(42, j, 0));
    NormalLanes g(seeds);
    std::vector<double> z(64);
    double s1 = 0, s2 = 0, s4 = 0, tail = 0;
    const int draws = 4000;
    for (int n = 0; n < draws; ++n) {
        g.next(z.data());
        for (double v : z) {
            s1 += v;
            s2 += v * v;
            s4 += v * v * v * v;
            tail += v > 2.0;
        }
    }
    const double N = 64.0 * draws;
    EXPECT_NEAR(s1 / N, 0.0, 5.0 / std::sqrt(N));
    EXPECT_NEAR(s2 / N, 1.0, 5.0 * std::sqrt(2.0 / N));
    EXPECT_NEAR(s4 / N, 3.0, 5.0 * std::sqrt(96.0 / N));
    EXPECT_NEAR(tail / N, 0.0227501, 5.0 * std::sqrt(0.0227501 / N));
}

TEST(Rng, LanesDependOnlyOnTheirOwnSeed) {
    const std::uint64_t a[] = {1, 2, 3}, b[] = {9, 2, 7};
    NormalLanes ga(a), gb(b);
    double za[3], zb[3];
    for (int n = 0; n < 10; ++n) {
        ga.next(za);
        gb.next(zb);
        EXPECT_EQ(za[1], zb[1]);
        EXPECT_NE(za[0], zb[0]);
    }
    EXPECT_NE(stream_seed(1, 0, 0), stream_seed(1, 0, 1));
    EXPECT_NE(stream_seed(1, 0, 0), stream_seed(1, 1, 0));
    EXPECT_NE(stream_seed(1, 0, 0), stream_seed(2, 0, 0));
}

TEST(SimConfig, Validation) {
    SimConfig c;
    EXPECT_NO_THROW(validate_config(c));
    c.n_paths = 0;
    EXPECT_THROW(validate_config(c), InsufficientDataError);
    c = {};
    c.dt = 0.0;
    EXPECT_THROW(validate_config(c), DomainError);
    c = {};
    c.t_max = -1.0;
    EXPECT_THROW(validate_config(c), DomainError);
    c = {};
    c.guard_fraction = 1.0;
    EXPECT_THROW(validate_config(c), DomainError);
    EXPECT_NEAR(std::exp(-0.2 * default_horizon(0.2)), 1e-6, 1e-18);
}

TEST(SimulatePath, DeterministicForFixedSeed) {
    SimConfig cfg;
    cfg.t_max = 2.0;
    cfg.seed = 17;
    const ThresholdStrategy s = mild_strategy(mild3(), 0.1);
    const auto a = simulate_path(gbm(), s, 1.2, cfg, 5);
    const auto b = simulate_path(gbm(), s, 1.2, cfg, 5);
    EXPECT_TRUE(same_bits(a.states, b.states));
    EXPECT_TRUE(same_bits(a.control, b.control));
    EXPECT_EQ(a.substeps, b.substeps);
    const auto c = simulate_path(gbm(), s, 1.2, cfg, 6);
    EXPECT_FALSE(same_bits(a.states, c.states));
}

TEST(SimulatePath, ControlIsNondecreasing) {
    SimConfig cfg;
    cfg.t_max = 3.0;
    for (std::uint64_t p = 0; p < 20; ++p) {
        for (const ThresholdStrategy& s : {ThresholdStrategy{StrongThreshold{strong04().b_star}},
                                           ThresholdStrategy{mild_strategy(mild3(), 0.1)}}) {
            const auto r = simulate_path(gbm(), s, 0.3, cfg, p);
            for (std::size_t i = 1; i < r.control.size(); ++i) ASSERT_GE(r.control[i], r.control[i - 1]);
            for (std::size_t i = 1; i < r.local_time.size(); ++i) ASSERT_GE(r.local_time[i], r.local_time[i - 1]);
        }
    }
}

TEST(SimulatePath, ReflectionKeepsStateAtOrBelowThreshold) {
    SimConfig cfg;
    cfg.t_max = 5.0;
    const double b = strong04().b_star;
    double lt = 0.0;
    for (std::uint64_t p = 0; p < 20; ++p) {
        const auto r = simulate_path(gbm(), StrongThreshold{b}, 0.9 * b, cfg, p);
        for (double x : r.states) ASSERT_LE(x, b);
        EXPECT_LE(r.max_state, b);
        lt += r.local_time.back();
    }
    EXPECT_GT(lt, 0.0);
}

TEST(SimulatePath, InitialJumps) {
    SimConfig cfg;
    cfg.t_max = 0.01;
    const double b = strong04().b_star;
    const auto r = simulate_path(gbm(), StrongThreshold{b}, 2.0, cfg);
    ASSERT_FALSE(r.jumps.empty());
    EXPECT_EQ(r.jumps[0].kind, JumpKind::Initial);
    EXPECT_DOUBLE_EQ(r.jumps[0].size, 2.0 - b);
    EXPECT_EQ(r.states[0], b);
    EXPECT_DOUBLE_EQ(r.control[0], 2.0 - b);

    const auto m = simulate_path(gbm(), mild_strategy(mild3(), 0.2), 2.0, cfg);
    ASSERT_FALSE(m.jumps.empty());
    EXPECT_DOUBLE_EQ(m.jumps[0].size, 2.0 - (1.6 - 0.2));
    EXPECT_DOUBLE_EQ(m.states[0], 1.4);

    const auto w = simulate_path(gbm(), StrongThreshold{b}, 0.5 * b, cfg);
    EXPECT_TRUE(w.jumps.empty());
    EXPECT_EQ(w.control[0], 0.0);
    EXPECT_THROW(simulate_path(gbm(), StrongThreshold{b}, -1.0, cfg), DomainError);
}

TEST(SimulatePath, MetadataRecordsKnobs) {
    SimConfig cfg;
    cfg.t_max = 0.1;
    cfg.guard_fraction = 0.125;
    cfg.record_stride = 10;
    const auto r = simulate_path(gbm(), mild_strategy(mild3(), 0.1), 1.5, cfg);
    EXPECT_EQ(r.guard_fraction, 0.125);
    EXPECT_EQ(r.rate_cap, cfg.rate_cap);
    EXPECT_EQ(r.times.size(), 11u);
    EXPECT_GE(r.substeps, 100);
}

// The fraction of paths reaching beta* - 10 sqrt(dt) sigma beta* shrinks with dt.
TEST(SimulatePath, InaccessibilityTrend) {
    const auto& m = mild3();
    auto touching = [&](double dt) {
        SimConfig cfg;
        cfg.dt = dt;
        cfg.t_max = 2.0;
        const double level = m.beta_star - 10.0 * std::sqrt(dt) * 0.4 * m.beta_star;
        int hit = 0;
        long crossings = 0;
        for (std::uint64_t p = 0; p < 200; ++p) {
            const auto r = simulate_path(gbm(), mild_strategy(m, 0.1), 0.5 * m.beta_star, cfg, p);
            hit += r.max_state >= level;
            crossings += r.beta_hits;
            EXPECT_LT(r.max_state, m.beta_star);
        }
        EXPECT_EQ(crossings, 0);
        return hit / 200.0;
    };
    const double coarse = touching(1e-2), fine = touching(1e-4);
    EXPECT_GT(coarse, fine);
}

TEST(Ensemble, DeterministicAndVectorised) {
    SimConfig cfg;
    cfg.n_paths = 300;
    cfg.t_max = 3.0;
    const double xs[] = {0.1, 0.2}, qs[] = {0.2, 0.4}, ws[] = {0.5, 0.5};
    const ThresholdStrategy s = StrongThreshold{strong04().b_star};
    const auto a = simulate_ensemble(gbm(), s, xs, qs, ws, RunningCost::half_square(), cfg);
    const auto b = simulate_ensemble(gbm(), s, xs, qs, ws, RunningCost::half_square(), cfg);
    EXPECT_TRUE(a.vectorised);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(a.J[k].estimate, b.J[k].estimate);
        for (std::size_t q = 0; q < 2; ++q) EXPECT_EQ(a.w[k][q].estimate, b.w[k][q].estimate);
        EXPECT_NEAR(a.J[k].estimate, 0.5 * (a.w[k][0].estimate + a.w[k][1].estimate), 1e-12);
    }
    // batch size changes the lane layout, not the paths
    cfg.batch = 37;
    const auto c = simulate_ensemble(gbm(), s, xs, qs, ws, RunningCost::half_square(), cfg);
    EXPECT_NEAR(c.w[1][0].estimate, a.w[1][0].estimate, 1e-12);
}

TEST(Ensemble, ScalarAndVectorisedPathsAgree) {
    SimConfig cfg;
    cfg.n_paths = 200;
    cfg.t_max = 2.0;
    const double xs[] = {0.5 * (mild3().b_low + 1.6)}, qs[] = {0.2, 3.0}, ws[] = {0.5, 0.5};
    for (const ThresholdStrategy& s : {ThresholdStrategy{StrongThreshold{strong04().b_star}},
                                       ThresholdStrategy{mild_strategy(mild3(), 0.1)}}) {
        const auto fast = simulate_ensemble(gbm(), s, xs, qs, ws, RunningCost::half_square(), cfg);
        const auto slow = simulate_ensemble(gbm_generic(), s, xs, qs, ws, RunningCost::half_square(), cfg);
        EXPECT_TRUE(fast.vectorised);
        EXPECT_FALSE(slow.vectorised);
        for (std::size_t q = 0; q < 2; ++q)
            EXPECT_NEAR(fast.w[0][q].estimate, slow.w[0][q].estimate, 0.05 * fast.w[0][q].se);
    }
}

TEST(Ensemble, SingleAtomJEqualsW) {
    SimConfig cfg;
    cfg.n_paths = 200;
    cfg.t_max = 2.0;
    const ThresholdStrategy s = StrongThreshold{strong04().b_star};
    const auto w = estimate_w(gbm(), s, 0.2, 0.3, RunningCost::half_square(), cfg);
    const auto J = estimate_J(gbm(), s, 0.2, WeightedDiscount({{0.3, 1.0}}), RunningCost::half_square(), cfg);
    EXPECT_EQ(J.J.estimate, w.estimate);
    EXPECT_EQ(J.J.se, w.se);
    EXPECT_EQ(J.per_atom[0].estimate, w.estimate);
}

TEST(Ensemble, StartAboveThresholdAddsJump) {
    SimConfig cfg;
    cfg.n_paths = 200;
    cfg.t_max = 2.0;
    const double b = strong04().b_star;
    const ThresholdStrategy s = StrongThreshold{b};
    const auto disc = WeightedDiscount::two_point(0.2, 0.4);
    const auto at = estimate_J(gbm(), s, b, disc, RunningCost::half_square(), cfg);
    const auto above = estimate_J(gbm(), s, 3.0 * b, disc, RunningCost::half_square(), cfg);
    EXPECT_NEAR(above.J.estimate, at.J.estimate + 2.0 * b, 1e-12);
    EXPECT_NEAR(above.J.se, at.J.se, 1e-12);
}

TEST(Ensemble, CensoringReported) {
    SimConfig cfg;
    cfg.n_paths = 100;
    cfg.t_max = 1.0;
    const auto w = estimate_w(gbm(), StrongThreshold{strong04().b_star}, 0.2, 0.2, RunningCost::half_square(), cfg);
    EXPECT_GT(w.censoring_fraction, 0.9);
    EXPECT_GT(w.censoring_bias_bound, 0.0);
    EXPECT_EQ(w.n_paths, 100u);
}

TEST(Ensemble, Errors) {
    SimConfig cfg;
    const ThresholdStrategy s = StrongThreshold{1.0};
    const double xs[] = {0.5}, qs[] = {0.2}, ws[] = {1.0}, bad_q[] = {0.0};
    cfg.n_paths = 0;
    EXPECT_THROW(simulate_ensemble(gbm(), s, xs, qs, ws, RunningCost::half_square(), cfg), InsufficientDataError);
    cfg.n_paths = 10;
    cfg.t_max = 0.01;
    EXPECT_THROW(simulate_ensemble(gbm(), s, std::span<const double>{}, qs, ws, RunningCost::half_square(), cfg),
                 InsufficientDataError);
    EXPECT_THROW(simulate_ensemble(gbm(), s, xs, bad_q, ws, RunningCost::half_square(), cfg), DomainError);
    const double far[] = {-1.0};
    EXPECT_THROW(simulate_ensemble(gbm(), s, far, qs, ws, RunningCost::half_square(), cfg), DomainError);
    EXPECT_THROW(halving_check(gbm(), s, xs, qs, RunningCost::half_square(), cfg, 1), InsufficientDataError);
}

TEST(MonteCarlo, StrongMatchesClosedForm) {
    SimConfig cfg;
    cfg.n_paths = 2000;
    const auto& c = strong04();
    const double x0 = 0.5 * c.b_star;
    const auto w = estimate_w(gbm(), StrongThreshold{c.b_star}, x0, 0.2, RunningCost::half_square(), cfg);
    EXPECT_LE(std::abs(w.estimate - v_strong_eval(c, x0, 0, 0)), 3.0 * w.se);
    const auto J = estimate_J(gbm(), StrongThreshold{c.b_star}, x0, WeightedDiscount::two_point(0.2, 0.4),
                              RunningCost::half_square(), cfg);
    EXPECT_LE(std::abs(J.J.estimate - V_strong_eval(c, x0, 0)), 3.0 * J.J.se);
    EXPECT_LT(J.J.censoring_bias_bound, 0.1 * J.J.se);
}

TEST(MonteCarlo, MildMatchesClosedForm) {
    SimConfig cfg;
    cfg.n_paths = 2000;
    const auto& m = mild3();
    const double x0 = 0.5 * (m.b_low + m.beta_star);
    const auto w = estimate_w(gbm(), mild_strategy(m, 0.1), x0, 3.0, RunningCost::half_square(), cfg);
    EXPECT_LE(std::abs(w.estimate - v_mild_eval(m, x0, 1, 0)), 3.0 * w.se);
}

TEST(MonteCarlo, HalvingShiftSmall) {
    SimConfig cfg;
    cfg.t_max = 5.0;
    const double xs[] = {0.5 * strong04().b_star}, qs[] = {0.2, 0.4};
    const auto h = halving_check(gbm(), StrongThreshold{strong04().b_star}, xs, qs, RunningCost::half_square(), cfg, 200);
    EXPECT_EQ(h.n_paths, 200u);
    for (std::size_t q = 0; q < 2; ++q) EXPECT_LE(std::abs(h.shift[0][q]), 4.0 * h.shift_se[0][q] + 1e-3);
}

// The split step is second order: near beta* the shift is about 7e-4 at dt = 0.02 and 2e-4 at
// dt = 0.01. Left-point Euler shifts by about 6e-4 already at dt = 1e-3, so 6e-3 at dt = 0.01.
// Coarse steps also push lanes from below the guard band to near beta* in one diffusion step.
TEST(MonteCarlo, MildHalvingShiftIsSecondOrder) {
    SimConfig cfg;
    cfg.t_max = 2.0;
    const auto& m = mild3();
    const double xs[] = {0.25 * (m.b_low + 3.0 * m.beta_star)}, qs[] = {3.0};
    for (double dt : {2e-2, 1e-2}) {
        cfg.dt = dt;
        const auto h = halving_check(gbm(), mild_strategy(m, 0.1), xs, qs, RunningCost::half_square(), cfg, 2000);
        ASSERT_TRUE(std::isfinite(h.shift[0][0])) << "dt=" << dt;
        EXPECT_LT(std::abs(h.shift[0][0]), 5.0 * dt * dt) << "dt=" << dt;
    }
}

TEST(DeltaProbe, LadderFollowsDecomposition) {
    SimConfig cfg;
    cfg.n_paths = 1000;
    const auto& m = mild3();
    const double ladder[] = {0.4, 0.2, 0.1, 0.05};
    // v(beta* - delta; q2) + 2 - beta* + delta at x0 = 2
    const double expect[] = {1.1657005904285973, 1.1228434475714545, 1.1121291618571687, 1.1094505904285973};
    const auto p = delta_limit_probe(gbm(), mild_strategy(m, 0.1), ladder, 2.0, 3.0, RunningCost::half_square(), cfg);
    ASSERT_EQ(p.estimates.size(), 4u);
    for (int i = 0; i < 4; ++i) EXPECT_LE(std::abs(p.estimates[i].estimate - expect[i]), 3.0 * p.estimates[i].se);
    EXPECT_LE(std::abs(p.extrapolated - v_mild_eval(m, 2.0, 1, 0)), 3.0 * p.extrapolated_se);
    EXPECT_NEAR(p.curvature, 0.5 * m.a2, 0.1);  // exact dependence is a2 delta^2 / 2
}

TEST(DeltaProbe, SingleDeltaIsEstimateW) {
    SimConfig cfg;
    cfg.n_paths = 100;
    const double one[] = {0.1};
    const auto s = mild_strategy(mild3(), 0.1);
    const auto p = delta_limit_probe(gbm(), s, one, 2.0, 3.0, RunningCost::half_square(), cfg);
    const auto w = estimate_w(gbm(), s, 2.0, 3.0, RunningCost::half_square(), cfg);
    EXPECT_EQ(p.extrapolated, w.estimate);
}

TEST(DeltaProbe, Errors) {
    SimConfig cfg;
    cfg.n_paths = 10;
    const auto s = mild_strategy(mild3(), 0.1);
    const double up[] = {0.1, 0.2}, neg[] = {0.1, -0.1};
    EXPECT_THROW(delta_limit_probe(gbm(), s, up, 2.0, 3.0, RunningCost::half_square(), cfg), DomainError);
    EXPECT_THROW(delta_limit_probe(gbm(), s, neg, 2.0, 3.0, RunningCost::half_square(), cfg), DomainError);
    const double ok[] = {0.2, 0.1};
    EXPECT_THROW(delta_limit_probe(gbm(), s, ok, 1.0, 3.0, RunningCost::half_square(), cfg), DomainError);
}
