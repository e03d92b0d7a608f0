#include "tisc/verifier.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tisc;

namespace {

// Sup-norm relative error of the FD solution of atom i on [0, b*] (v(0) = 0, v'(b*) = 1).
double strong_fd_error(const StrongCandidate& c, int i, std::size_t n) {
    const auto mesh = uniform_grid(0.0, c.b_star, n);
    const auto v = ode_oracle_solve(DiffusionModel::gbm(std::sqrt(c.sigma2)), c.q(i), RunningCost::half_square(),
                                    RateFunction::zero(), mesh);
    double err = 0.0, scale = 0.0;
    for (std::size_t j = 1; j < n; ++j) {
        const double cf = v_strong_eval(c, mesh[j], i, 0, Side::Left);
        err = std::max(err, std::abs(v[j] - cf));
        scale = std::max(scale, std::abs(cf));
    }
    return err / scale;
}

}  // namespace

TEST(Verifier, StrongPassesAtLowGap) {
    const auto B = bundle_from_strong(build_strong(0.16, 0.2, 0.4));
    const auto V = verify_conditions(B, make_verification_grid(B));
    EXPECT_TRUE(V.all_pass());
    EXPECT_LE(V.I.margin, 1e-9);
    EXPECT_GE(V.III.margin, -1e-9);
    EXPECT_LE(V.smooth_fit, 1e-8);
    EXPECT_EQ(V.II.points, 0u);
    for (double r : V.bvp_residual_max) EXPECT_LT(r, 1e-10);
    EXPECT_EQ(V.tol, 1e-9);
}

TEST(Verifier, StrongFailsConditionOneAtLargeGap) {
    const auto c = build_strong(0.16, 0.2, 3.0);
    const auto B = bundle_from_strong(c);
    const auto V = verify_conditions(B, make_verification_grid(B));
    EXPECT_FALSE(V.I.pass);
    EXPECT_GT(V.I.margin, 1e-3);
    EXPECT_LT(V.I.arg, c.b_star);
    EXPECT_LT(V.smooth_fit, 1e-8);  // the failure is not a pasting defect
}

TEST(Verifier, MildPassesAtCaseStudy) {
    const auto mb = build_mild(0.16, 0.2, 3.0);
    const auto B = bundle_from_mild(mb.candidate);
    const auto V = verify_conditions(B, make_verification_grid(B));
    EXPECT_TRUE(V.all_pass());
    EXPECT_LE(V.II.margin, 1e-9);
    EXPECT_GT(V.II.points, 0u);
    EXPECT_LE(V.smooth_fit, 1e-8);
}

TEST(Verifier, GridAvoidsBreakpoints) {
    const auto B = bundle_from_mild(build_mild(0.16, 0.2, 3.0).candidate);
    const auto G = make_verification_grid(B, 2000, 1e-6);
    for (const auto* g : {&G.waiting, &G.mild})
        for (double x : *g)
            for (double p : B.breakpoints) EXPECT_GE(std::abs(x - p), 1e-6);
    EXPECT_DOUBLE_EQ(G.strong.front(), B.b);
    EXPECT_DOUBLE_EQ(G.s_truncation, 10.0 * B.b);
}

TEST(Verifier, EmptyGridRejected) {
    const auto B = bundle_from_strong(build_strong(0.16, 0.2, 0.4));
    auto G = make_verification_grid(B, 100);
    G.waiting.clear();
    EXPECT_THROW(verify_conditions(B, G), InsufficientDataError);
}

TEST(Verifier, BundleRequiresValidMild) {
    EXPECT_THROW(bundle_from_mild(build_mild(0.16, 0.2, 0.21).candidate), ParameterError);
}

TEST(Verifier, BreakpointsRejectedByResidual) {
    const auto B = bundle_from_strong(build_strong(0.16, 0.2, 0.4));
    const std::vector<double> g{0.1, B.b};
    EXPECT_THROW(bvp_residual(B, g), DomainError);
}

TEST(Verifier, DeviationGains) {
    const auto c = build_strong(0.16, 0.2, 0.4);
    const auto B = bundle_from_strong(c);
    const auto zero = RateFunction::zero();
    for (double u : {0.5, 1.0, 2.0, 10.0})
        for (double x : composite_grid(0.0, c.b_star, 500))
            EXPECT_LE(deviation_gain_rate(B, zero, RateFunction::constant(u), x), 1e-9);
    for (double x : uniform_grid(c.b_star, 10.0 * c.b_star, 500)) EXPECT_LE(deviation_gain_jump(B, x), 1e-9);
    EXPECT_THROW(deviation_gain_jump(B, 0.5 * c.b_star), DomainError);

    const auto d = build_strong(0.16, 0.2, 3.0);
    const auto Bd = bundle_from_strong(d);
    const auto V = verify_conditions(Bd, make_verification_grid(Bd));
    EXPECT_GT(deviation_gain_rate(Bd, zero, RateFunction::constant(1.0), V.I.arg), 1e-3);
}

// V' = 1 on the mild region, so changing the rate there has no first-order effect.
TEST(Verifier, RateGainVanishesOnMildRegion) {
    const auto B = bundle_from_mild(build_mild(0.16, 0.2, 3.0).candidate);
    const auto us = B.rate();
    for (double x : {1.0, 1.3, 1.55}) EXPECT_NEAR(deviation_gain_rate(B, us, RateFunction::constant(7.0), x), 0.0, 1e-9);
}

TEST(Verifier, JumpBalanceOnAffinePiece) {
    const auto c = build_strong(0.16, 0.2, 0.4);
    const auto B = bundle_from_strong(c);
    const double x = 3.0 * c.b_star;
    const double expect = 0.5 * x * x - 0.5 * (0.2 * v_strong_eval(c, x, 0, 0) + 0.4 * v_strong_eval(c, x, 1, 0));
    EXPECT_NEAR(jump_balance(B, x), expect, 1e-14);
}

TEST(FdOracle, StrongSecondOrder) {
    for (double q2 : {0.4, 3.0}) {
        const auto c = build_strong(0.16, 0.2, q2);
        for (int i = 0; i < 2; ++i) {
            const double e1 = strong_fd_error(c, i, 1000), e2 = strong_fd_error(c, i, 2000);
            EXPECT_LT(e1, 1e-4);
            EXPECT_GT(e1 / e2, 3.0) << "q2=" << q2 << " atom " << i;
        }
    }
}

TEST(FdOracle, ExactForQuadraticSolutions) {
    // v = x^2/(2(q - sigma2)) solves the zero-rate problem with v'(1) = 1/(q - sigma2).
    const auto model = DiffusionModel::gbm(0.4);
    const double q = 0.5, k = 1.0 / (q - 0.16);
    const auto mesh = uniform_grid(0.0, 1.0, 41);
    const auto v = ode_oracle_solve(model, q, RunningCost::half_square(), RateFunction::zero(), mesh,
                                    OracleBC::dirichlet(0.0), OracleBC::neumann(k));
    for (std::size_t j = 0; j < mesh.size(); ++j) EXPECT_NEAR(v[j], 0.5 * k * mesh[j] * mesh[j], 1e-12);
}

TEST(FdOracle, RejectsBadMeshes) {
    const auto model = DiffusionModel::gbm(0.4);
    const auto f = RunningCost::half_square();
    EXPECT_THROW(ode_oracle_solve(model, 0.5, f, RateFunction::zero(), std::vector<double>{0.0, 1.0}),
                 InsufficientDataError);
    EXPECT_THROW(ode_oracle_solve(model, 0.5, f, RateFunction::zero(), std::vector<double>{0.0, 1.0, 0.5}),
                 DomainError);
    EXPECT_THROW(ode_oracle_solve(model, 0.0, f, RateFunction::zero(), std::vector<double>{0.0, 0.5, 1.0}),
                 DomainError);
}
