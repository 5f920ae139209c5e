#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace maglim;

namespace {
const LinearPlant kPlant = build_plant(oracle::nominal_params());
}

TEST(Certify, ZeroGainGivesOpenLoopNorm) {
    const auto rep = certify_gain(kPlant, Mat2::Zero());
    EXPECT_TRUE(rep.feasible);
    // A is a scaled rotation, so its norm is sqrt(a^2 + b^2).
    const auto p = oracle::nominal_params();
    const double a = 1.0 - p.dt * p.R_ohm / p.L_H, b = p.dt * p.omega_nom;
    EXPECT_NEAR(rep.sigma_closed, std::hypot(a, b), 1e-12);
    EXPECT_NEAR(rep.sigma_closed, oracle::sigma_max(kPlant.A), 1e-12);
    // Commonly quoted as 0.996298; the exact value is 0.9962928.
    EXPECT_NEAR(rep.sigma_closed, 0.996298, 1e-5);
}

TEST(Certify, PublishedGains) {
    const auto base = certify_gain(kPlant, reference_baseline_gain().K);
    EXPECT_FALSE(base.feasible);
    EXPECT_NEAR(base.sigma_closed, 1.005, 0.002);
    EXPECT_GT(base.eig_hi, 0.0);

    const auto fit = certify_gain(kPlant, reference_fitted_gain().K);
    EXPECT_TRUE(fit.feasible);
    EXPECT_NEAR(fit.sigma_closed, 0.9946, 0.002);
    EXPECT_LT(fit.eig_hi, 0.0);
}

TEST(Certify, AgreesWithJacobiSvdOutsideBand) {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> n(0.0, 1.0);
    int checked = 0;
    for (int k = 0; k < 5000; ++k) {
        // Physically scaled gains around the closed-loop unit circle.
        Mat2 K;
        K << 2.0 * n(rng), 0.1 * n(rng), 0.1 * n(rng), 0.1 * n(rng);
        const double s = oracle::sigma_closed(kPlant, K);
        if (std::abs(s - 1.0) < 1e-9) continue;
        ++checked;
        const auto rep = certify_gain(kPlant, K);
        ASSERT_EQ(rep.feasible, s < 1.0) << "sigma " << s;
        EXPECT_NEAR(rep.sigma_closed, s, 1e-12 * std::max(1.0, s));
    }
    EXPECT_GT(checked, 4900);
}

TEST(Certify, EpsilonBandIsInclusive) {
    // K that puts sigma exactly at sqrt(1 - eps) ... 1 - eps on M'M.
    const Mat2 M = std::sqrt(1.0 - 1e-9) * Mat2::Identity();
    const Mat2 K = kPlant.B.inverse() * (kPlant.A - M);
    EXPECT_TRUE(certify_gain(kPlant, K, 1e-9 * 0.5).feasible);
    EXPECT_FALSE(certify_gain(kPlant, K, 1e-9 * 2.0).feasible);
}

TEST(Certify, IssueCertificateAttachesMargin) {
    const Gain g = issue_certificate(kPlant, reference_fitted_gain());
    ASSERT_TRUE(g.certificate);
    EXPECT_NEAR(g.certificate->margin, 1.0 - g.certificate->sigma_closed, 1e-15);
    EXPECT_FALSE(issue_certificate(kPlant, reference_baseline_gain()).certificate);
}

TEST(Certify, AuditCleanForCertifiedGains) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SimulateOptions so;
    so.record_presat = true;
    so.stop.tol = 1e-9;
    for (int k = 0; k < 100; ++k) {
        const Gain g(oracle::random_certified_gain(kPlant, rng, 0.99));
        const double rr = 0.9 * kPlant.i_max * std::sqrt(u(rng)), ar = 2 * M_PI * u(rng);
        const double ri = kPlant.i_max * std::sqrt(u(rng)) * 0.999, ai = 2 * M_PI * u(rng);
        const State xr{rr * std::cos(ar), rr * std::sin(ar)};
        const State x0{ri * std::cos(ai), ri * std::sin(ai)};
        const auto traj = simulate(kPlant, g, x0, xr, equilibrium_input(kPlant, xr), so);
        const auto rep = audit_lyapunov(traj, xr);
        ASSERT_TRUE(rep.clean) << "violation " << to_string(rep.kind) << " at " << rep.first_violation;
    }
}

TEST(Certify, AuditFlagsBaselineBoundaryCase) {
    SimulateOptions so;
    so.record_presat = true;
    so.stop.max_steps = 5000;
    const State xr{2.9465, 2.9465};
    const auto traj = simulate(kPlant, reference_baseline_gain(), {0.0, 0.0}, xr, equilibrium_input(kPlant, xr), so);
    const auto rep = audit_lyapunov(traj, xr);
    EXPECT_FALSE(rep.clean);
    EXPECT_NE(rep.kind, AuditViolation::None);
}

TEST(Certify, AuditTrivialCases) {
    Trajectory t;
    EXPECT_THROW(audit_lyapunov(t, {}), PreconditionError);
    const State xr{1.0, 1.0};
    t.records.push_back({0, xr, {}, false, 0.0, std::nullopt});
    t.records.push_back({1, xr, {}, false, 0.0, std::nullopt});
    EXPECT_TRUE(audit_lyapunov(t, xr).clean);
    t.records.push_back({2, {1.5, 1.0}, {}, false, 0.25, std::nullopt});
    t.records.push_back({3, {1.6, 1.0}, {}, false, 0.36, std::nullopt});
    const auto rep = audit_lyapunov(t, xr);
    EXPECT_FALSE(rep.clean);
    EXPECT_EQ(rep.first_violation, 3u);
    EXPECT_EQ(rep.kind, AuditViolation::NoDecrease);
}

TEST(Certify, StuckPointOfBaselineIsAFixedPoint) {
    const State xr{2.9465, 2.9465};
    const auto pts = find_stuck_points(kPlant, reference_baseline_gain().K, xr);
    ASSERT_FALSE(pts.empty());
    const Mat2 M = closed_loop_matrix(kPlant, reference_baseline_gain().K);
    // |xr| = 4.16703 lies just outside the circle, so one fixed point sits next
    // to the reference; the stuck one is far from it.
    double farthest = 0.0;
    for (const auto& p : pts) {
        const Vec2 next = saturate(xr.vec() + M * (p.vec() - xr.vec()), kPlant.i_max);
        EXPECT_LT((next - p.vec()).norm(), 1e-8);
        farthest = std::max(farthest, (p.vec() - xr.vec()).norm());
    }
    EXPECT_GT(farthest, 0.1);
    // The simulated trajectory ends at one of them.
    SimulateOptions so;
    so.stop.tol = 1e-12;
    const auto traj = simulate(kPlant, reference_baseline_gain(), {0.0, 0.0}, xr, equilibrium_input(kPlant, xr), so);
    double best = 1e9;
    for (const auto& p : pts) best = std::min(best, (p.vec() - traj.back().state.vec()).norm());
    EXPECT_LT(best, 1e-6);
    EXPECT_GT((traj.back().state.vec() - xr.vec()).norm(), 0.1);
}

TEST(Certify, CertifiedGainHasNoStuckPoint) {
    std::mt19937_64 rng(23);
    for (int k = 0; k < 50; ++k) {
        const Mat2 K = oracle::random_certified_gain(kPlant, rng, 0.995);
        const double a = 0.7 * k;
        const State xr{0.9 * kPlant.i_max * std::cos(a), 0.9 * kPlant.i_max * std::sin(a)};
        EXPECT_TRUE(find_stuck_points(kPlant, K, xr).empty());
    }
}

TEST(Certify, SchurBlockAgreesWithCertificate) {
    std::mt19937_64 rng(24);
    std::normal_distribution<double> n(0.0, 1.0);
    int agree = 0, total = 0;
    for (int k = 0; k < 3000; ++k) {
        Mat2 K;
        K << 2.0 * n(rng), 0.1 * n(rng), 0.1 * n(rng), 0.1 * n(rng);
        if (std::abs(oracle::sigma_closed(kPlant, K) - 1.0) < 1e-6) continue;
        const auto s = schur_check(kPlant, K);
        ++total;
        agree += s.agree ? 1 : 0;
    }
    EXPECT_EQ(agree, total);
}

TEST(Certify, FirstOrderMatrixIsMonotoneInResistance) {
    std::mt19937_64 rng(25);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> r(0.1, 5.0);
    int positive = 0;
    for (int k = 0; k < 1000; ++k) {
        Mat2 K;
        K << n(rng), 0.1 * n(rng), 0.1 * n(rng), 0.1 * n(rng);
        auto p1 = oracle::nominal_params();
        p1.R_ohm = r(rng);
        auto p2 = p1;
        p2.R_ohm = p1.R_ohm + r(rng);
        const double l1 = first_order_margin(p1, K);
        const double l2 = first_order_margin(p2, K);
        // Raising R adds 2 dR / L to the symmetric part.
        EXPECT_NEAR(l2 - l1, 2.0 * (p2.R_ohm - p1.R_ohm) / p1.L_H, 1e-9 * (1.0 + std::abs(l2)));
        if (l1 > 0.0) {
            ++positive;
            EXPECT_GT(l2, 0.0);
        }
    }
    EXPECT_GT(positive, 100);
}

TEST(Certify, RobustSweepForPublishedFit) {
    const auto rep = certify_robust(oracle::nominal_params(), reference_fitted_gain().K, 5.0 - 1.3, 50);
    EXPECT_TRUE(rep.first_order_holds);
    EXPECT_TRUE(rep.all_feasible);
    EXPECT_EQ(rep.samples.size(), 50u);
    EXPECT_NEAR(rep.samples.back().R_ohm, 5.0, 1e-12);
    EXPECT_THROW(certify_robust(oracle::nominal_params(), reference_baseline_gain().K, 1.0, 5), PreconditionError);
}

// The resistance argument linearizes around A - BK = I (dt -> 0). Raising R
// shifts the closed loop by -dt dR/L I, which pushes a loop near -I further
// out of the unit ball. Such gains are far from physical (|K11| ~ 500).
TEST(Certify, ExactCertificateCanDegradeForNonPhysicalGains) {
    const auto p = oracle::nominal_params();
    const auto plant = build_plant(p);
    const Mat2 M = -0.99 * Mat2::Identity();
    const Mat2 K = plant.B.inverse() * (plant.A - M);
    ASSERT_TRUE(certify_gain(plant, K).feasible);
    auto hi = p;
    hi.R_ohm = 5.0;
    EXPECT_FALSE(certify_gain(build_plant(hi), K).feasible);
}
