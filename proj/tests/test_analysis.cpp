#include <gtest/gtest.h>

#include <random>

#include "tdma_fl/analysis.hpp"
#include "tdma_fl/quadratic.hpp"

using namespace tdma_fl;

namespace {

SystemConfig unit_timing(int n, int s, int batch, double eta)
{
    SystemConfig cfg;
    cfg.num_devices = n;
    cfg.group_size = s;
    cfg.batch_size = batch;
    cfg.step_size = eta;
    cfg.horizon = 1'000'000;
    cfg.with_compute_slots(1);
    return cfg;
}

} // namespace

TEST(EstimateConstants, IdentityCurvatureHasUnitSmoothness)
{
    std::mt19937_64 rng(1);
    QuadraticOptions o;
    o.eig_min = o.eig_max = 1.0;
    auto q = make_quadratic(4, 6, 0.5, rng, o);
    auto c = estimate_constants(q.task, 50, 3.0, rng);
    EXPECT_NEAR(c.L_smooth, 1.0, 1e-6);
    EXPECT_EQ(c.provenance, Provenance::estimated);
}

TEST(EstimateConstants, SmoothnessWithinOnePercentAboveExact)
{
    // The estimator only sees ratios ||grad diff|| / ||w diff||, which never
    // exceed the true L except by round-off; it should still land on it.
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        QuadraticOptions o;
        o.eig_min = 0.1;
        o.eig_max = 1.0 + trial;
        auto q = make_quadratic(3, 8, 1.0, rng, o);
        auto c = estimate_constants(q.task, 40, 2.0, rng);
        EXPECT_GE(c.L_smooth, q.exact.L_smooth * (1.0 - 1e-9));
        EXPECT_LE(c.L_smooth, q.exact.L_smooth * 1.01);
    }
}

TEST(EstimateConstants, HeterogeneityMatchesExactValue)
{
    std::mt19937_64 rng(3);
    auto q = make_quadratic(5, 4, 1.3, rng);
    auto c = estimate_constants(q.task, 30, 2.0, rng);
    EXPECT_NEAR(c.gamma_sq, q.exact.gamma_sq, 0.05 * q.exact.gamma_sq);

    auto h = make_quadratic(5, 4, 0.0, rng);
    auto ch = estimate_constants(h.task, 30, 2.0, rng);
    EXPECT_LT(ch.gamma_sq, 1e-20);
}

TEST(EstimateConstants, NoiselessSamplesGiveZeroVariance)
{
    std::mt19937_64 rng(4);
    QuadraticOptions o;
    o.noise_std = 0.0;
    auto q = make_quadratic(4, 5, 1.0, rng, o);
    auto c = estimate_constants(q.task, 30, 2.0, rng);
    EXPECT_LT(c.sigma_sq, 1e-10);
    EXPECT_NEAR(c.M, 1.0, 1e-8);
}

TEST(EstimateConstants, NoisySamplesRecoverVariance)
{
    // Centred per-device noise: E||grad l||^2 = ||grad f_n||^2 + s_n^2 exactly.
    // The pooled fit mixes devices with different s_n, so the slope drifts a
    // little above 1 and the intercept compensates.
    std::mt19937_64 rng(5);
    auto q = make_quadratic(4, 5, 1.0, rng);
    auto c = estimate_constants(q.task, 40, 2.0, rng);
    EXPECT_GE(c.M, 1.0);
    EXPECT_LT(c.M, 1.02);
    EXPECT_NEAR(c.sigma_sq, q.exact.sigma_sq, 0.01 * q.exact.sigma_sq);
}

TEST(EstimateConstants, DegenerateSampling)
{
    std::mt19937_64 rng(6);
    auto q = make_quadratic(2, 3, 1.0, rng);
    EXPECT_THROW(estimate_constants(q.task, 10, 0.0, rng), ConfigError);
    EXPECT_THROW(estimate_constants(q.task, 1, 1.0, rng), ConfigError);
}

TEST(DescentCheck, HomogeneousFullBatchMarginIsAnalytic)
{
    // Identical samples, A = I, S = N, full batch: w_{k+1} = w_k - eta (w_k - c)
    // deterministically, so the margin is eta^2 ||g||^2 (1/(2SB) - 1/2).
    QuadraticOptions o;
    o.eig_min = o.eig_max = 1.0;
    o.noise_std = 0.0;
    o.samples_per_device = 4;
    for (int batch : {1, 4}) {
        std::mt19937_64 rng(7);
        auto q = make_quadratic(2, 3, 0.0, rng, o);
        const double eta = 0.3;
        auto cfg = unit_timing(2, 2, batch, eta);
        auto probes = trajectory_probes(q.task, cfg, 5, q.optimum, 2.0, rng);
        DescentCheckOptions opts;
        opts.trials = 20;
        auto report = check_descent_lemma(q.task, q.exact, cfg, probes, rng, opts);
        ASSERT_EQ(report.probes.size(), 5u);
        for (std::size_t i = 0; i < probes.size(); ++i) {
            const auto& r = report.probes[i];
            const double g2 = q.task.global_gradient(probes[i].w).squaredNorm();
            const double expected = eta * eta * g2 * (1.0 / (2.0 * 2.0 * batch) - 0.5);
            EXPECT_NEAR(r.margin, expected, 1e-12 * std::max(1.0, g2));
            EXPECT_LT(r.lhs_stderr, 1e-14);
        }
    }
}

TEST(DescentCheck, SingleSampleSingleDeviceIsTight)
{
    QuadraticOptions o;
    o.eig_min = o.eig_max = 1.0;
    o.noise_std = 0.0;
    o.samples_per_device = 1;
    std::mt19937_64 rng(8);
    auto q = make_quadratic(1, 3, 0.0, rng, o);
    auto cfg = unit_timing(1, 1, 1, 0.5);
    auto probes = trajectory_probes(q.task, cfg, 4, q.optimum, 2.0, rng);
    DescentCheckOptions opts;
    opts.trials = 10;
    auto report = check_descent_lemma(q.task, q.exact, cfg, probes, rng, opts);
    EXPECT_EQ(report.violations, 0);
    for (const auto& r : report.probes)
        EXPECT_NEAR(r.margin, 0.0, 1e-12);
}

TEST(DescentCheck, MarginVanishesWithStepSize)
{
    std::mt19937_64 rng(9);
    auto q = make_quadratic(4, 3, 0.5, rng);
    auto cfg = unit_timing(4, 2, 4, 1e-7);
    auto probes = trajectory_probes(q.task, cfg, 3, q.optimum, 1.0, rng);
    DescentCheckOptions opts;
    opts.trials = 50;
    auto report = check_descent_lemma(q.task, q.exact, cfg, probes, rng, opts);
    for (const auto& r : report.probes)
        EXPECT_LT(std::abs(r.margin), 1e-5);
}

TEST(DescentCheck, ProbesComeFromStaleTrajectories)
{
    std::mt19937_64 rng(10);
    auto q = make_quadratic(6, 3, 0.5, rng);
    auto cfg = unit_timing(6, 2, 4, 0.05);
    auto probes = trajectory_probes(q.task, cfg, 10, q.optimum, 1.0, rng);
    for (const auto& p : probes) {
        EXPECT_GE(p.round, 3);
        EXPECT_LE(p.round, 9);
        ASSERT_EQ(p.transmitters.size(), 2u);
        for (auto d : p.staleness)
            EXPECT_EQ(d, staleness_closed_form(p.round, cfg));
    }
    DescentCheckOptions opts;
    opts.trials = 10;
    opts.target_stderr = 1e-30;
    auto report = check_descent_lemma(q.task, q.exact, cfg, probes, rng, opts);
    EXPECT_FALSE(report.warnings.empty());
}

TEST(StepSize, BetaFormulaAndCap)
{
    AssumptionConstants c;
    c.L_smooth = 2.0;
    c.M = 1.0;
    // S=2, B=4, N=8: (8 / 32) (sqrt(1 + 16) - 1).
    EXPECT_NEAR(theorem_beta(c, 2, 4, 8), 0.25 * (std::sqrt(17.0) - 1.0), 1e-15);
    auto s = theorem_step_size(c, 2, 4, 8, 99);
    EXPECT_NEAR(s.eta, 0.025 * (std::sqrt(17.0) - 1.0), 1e-15);
    EXPECT_FALSE(s.capped);
    auto capped = theorem_step_size(c, 8, 400, 8, 0);
    EXPECT_TRUE(capped.capped);
    EXPECT_EQ(capped.eta, 1.0);
}

TEST(RateTrend, ReportStructure)
{
    std::mt19937_64 rng(11);
    auto q = make_quadratic(4, 3, 1.0, rng);
    auto cfg = unit_timing(4, 4, 4, 0.1);
    RateTrendOptions o;
    o.group_sizes = {1, 4, 2, 3};
    o.rounds = 100;
    o.seeds = 3;
    o.decay_group_size = 2;
    auto report = rate_trend(q.task, q.exact, cfg, o, q.optimum, rng);
    ASSERT_EQ(report.by_group.size(), 3u);
    EXPECT_EQ(report.by_group[0].num_groups, 1);
    EXPECT_EQ(report.by_group[1].num_groups, 2);
    EXPECT_EQ(report.by_group[2].num_groups, 4);
    EXPECT_EQ(report.notices.size(), 1u); // S=3 skipped
    for (const auto& p : report.by_group) {
        EXPECT_EQ(p.per_seed.size(), 3u);
        EXPECT_NEAR(p.eta, theorem_step_size(q.exact, p.group_size, 4, 4, 100).eta, 0.0);
    }
    ASSERT_TRUE(report.decay_scaled.has_value());
    EXPECT_EQ(report.decay_scaled->rounds, 400);
    EXPECT_GT(report.decay_ratio, 0.0);
}

TEST(DescentCheck, MonteCarloAgreesWithExactExpectation)
{
    std::mt19937_64 rng(12);
    auto q = make_quadratic(4, 5, 0.5, rng);
    auto cfg = unit_timing(4, 2, 4, 0.05);
    auto probes = trajectory_probes(q.task, cfg, 8, q.optimum, 2.0, rng);
    DescentCheckOptions opts;
    opts.trials = 4000;
    auto report = check_descent_lemma(q.task, q.exact, cfg, probes, rng, opts);
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const double exact = quadratic_expected_next_loss(q.task, q.curvature, probes[i], 4, 0.05);
        EXPECT_LT(std::abs(report.probes[i].lhs - exact), 4.0 * report.probes[i].lhs_stderr);
    }
}

TEST(DescentCheck, ExactExpectationWithFullBatchIsDeterministic)
{
    std::mt19937_64 rng(13);
    QuadraticOptions o;
    o.samples_per_device = 4;
    auto q = make_quadratic(2, 3, 0.5, rng, o);
    auto cfg = unit_timing(2, 1, 4, 0.1);
    auto probes = trajectory_probes(q.task, cfg, 3, q.optimum, 1.0, rng);
    for (const auto& p : probes) {
        const Vector g = q.task.local_gradient(p.transmitters[0], p.stale_models[0]);
        EXPECT_NEAR(quadratic_expected_next_loss(q.task, q.curvature, p, 4, 0.1),
                    q.task.global_loss(p.w - 0.1 * g), 1e-12);
    }
}
