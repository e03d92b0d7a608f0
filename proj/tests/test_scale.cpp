#include "tisc/mild_case.hpp"
#include "tisc/scale.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tisc;

// With mu = u = 0 and sigma(x) = s x every integral has a closed form.
TEST(ScaleFunction, DriftlessGbmClosedForms) {
    const double s2 = 0.16, c = 0.5;
    const ScaleFunction sf(DiffusionModel::gbm(0.4), RateFunction::zero(), 2.0, c);
    for (double x : {0.5, 0.7, 1.0, 1.5, 1.99}) {
        const auto st = sf.state_at(x);
        EXPECT_NEAR(st.I, 0.0, 1e-14);
        EXPECT_NEAR(st.s, x - c, 1e-12);
        EXPECT_NEAR(st.s_prime(), 1.0, 1e-14);
        EXPECT_NEAR(st.m, 2.0 / s2 * (1.0 / c - 1.0 / x), 1e-10);
        EXPECT_NEAR(st.E, 2.0 / s2 * ((x - c) / c - std::log(x / c)), 1e-10);
        EXPECT_NEAR(st.N, 2.0 / s2 * (std::log(x / c) + c / x - 1.0), 1e-10);
    }
    const auto [s, sp] = scale_eval(sf, 1.2);
    EXPECT_NEAR(s, 0.7, 1e-12);
    EXPECT_NEAR(sp, 1.0, 1e-14);
}

// Constant rate k: I(x) = -(2k/s2)(1/c - 1/x), so s' = exp(-I).
TEST(ScaleFunction, ConstantRateExponent) {
    const double s2 = 0.16, k = 0.3, c = 0.5;
    const ScaleFunction sf(DiffusionModel::gbm(0.4), RateFunction::constant(k), 2.0, c);
    for (double x : {0.6, 1.0, 1.9}) {
        const double I = -2.0 * k / s2 * (1.0 / c - 1.0 / x);
        EXPECT_NEAR(sf.state_at(x).I, I, 1e-11);
        EXPECT_NEAR(sf.state_at(x).s_prime(), std::exp(-I), 1e-10 * std::exp(-I));
    }
}

TEST(ScaleFunction, DefaultBasePointSitsInZeroRatePiece) {
    const auto m = build_mild(0.16, 0.2, 3.0).candidate;
    const ScaleFunction sf(DiffusionModel::gbm(0.4), mild_rate(m), m.beta_star);
    EXPECT_GT(sf.base(), 0.0);
    EXPECT_LT(sf.base(), m.b_low);
}

TEST(ScaleFunction, RejectsBadArguments) {
    const auto gbm = DiffusionModel::gbm(0.4);
    EXPECT_THROW(ScaleFunction(gbm, RateFunction::zero(), 0.0), DomainError);
    EXPECT_THROW(ScaleFunction(gbm, RateFunction::zero(), 1.0, 1.5), DomainError);
    const ScaleFunction sf(gbm, RateFunction::zero(), 1.0, 0.5);
    EXPECT_THROW(sf.state_at(0.4), DomainError);
    EXPECT_THROW(sf.state_at(1.0), DomainError);
}

TEST(ClassifySequence, Verdicts) {
    const std::vector<double> linear{1, 2, 3, 4, 5, 6};
    EXPECT_EQ(classify_sequence(linear), Divergence::Divergent);
    std::vector<double> geo;
    for (int k = 1; k <= 20; ++k) geo.push_back(1.0 - std::ldexp(1.0, -k));
    EXPECT_EQ(classify_sequence(geo), Divergence::Convergent);
    const std::vector<double> blowup{1, 2, kInf, kInf};
    EXPECT_EQ(classify_sequence(blowup), Divergence::Divergent);
    const std::vector<double> mixed{1, 2, 2.7, 3.3, 3.8};  // ratios near 0.8
    EXPECT_EQ(classify_sequence(mixed), Divergence::Inconclusive);
    EXPECT_THROW(classify_sequence(std::vector<double>{1, 2, 3}), InsufficientDataError);
}

TEST(Feller, MildRateMakesBetaEntranceNotExit) {
    const auto m = build_mild(0.16, 0.2, 3.0).candidate;
    const ScaleFunction sf(DiffusionModel::gbm(0.4), mild_rate(m), m.beta_star, 0.5 * m.b_low);
    const auto ladder = default_ladder(sf);
    ASSERT_EQ(ladder.size(), 8u);
    const auto r = feller_classify_upper(sf, m.beta_star, ladder);
    EXPECT_EQ(r.entrance_verdict, Divergence::Divergent);
    EXPECT_EQ(r.speed_scale_verdict, Divergence::Convergent);
    EXPECT_EQ(r.verdict, BoundaryVerdict::EntranceNotExit);
    EXPECT_STREQ(to_string(r.verdict), "EntranceNotExit");
    EXPECT_TRUE(std::is_sorted(r.entrance_integral_estimates.begin(), r.entrance_integral_estimates.end()));
}

TEST(Feller, ZeroRateLeavesInteriorPointAccessible) {
    const ScaleFunction sf(DiffusionModel::gbm(0.4), RateFunction::zero(), 1.6, 0.35);
    const auto r = feller_classify_upper(sf, 1.6, default_ladder(sf));
    EXPECT_EQ(r.entrance_verdict, Divergence::Convergent);
    EXPECT_EQ(r.verdict, BoundaryVerdict::Accessible);
}

TEST(Feller, RejectsBadLadders) {
    const ScaleFunction sf(DiffusionModel::gbm(0.4), RateFunction::zero(), 1.6, 0.35);
    EXPECT_THROW(feller_classify_upper(sf, 1.5, default_ladder(sf)), DomainError);
    EXPECT_THROW(feller_classify_upper(sf, 1.6, std::vector<double>{1.0, 1.1, 1.2}), InsufficientDataError);
    EXPECT_THROW(feller_classify_upper(sf, 1.6, std::vector<double>{1.0, 1.2, 1.1, 1.3}), DomainError);
    EXPECT_THROW(feller_classify_upper(sf, 1.6, std::vector<double>{1.0, 1.1, 1.2, 1.6}), DomainError);
}
