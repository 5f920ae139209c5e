#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace maglim;

namespace {

FullOrderParams matched() { return fullorder_params_matching(oracle::nominal_params()); }

double max_abs_diff(const FullOrderState& a, const FullOrderState& b) {
    const auto x = a.to_array(), y = b.to_array();
    double d = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d = std::max(d, std::abs(x[i] - y[i]));
    return d;
}

} // namespace

TEST(FullOrder, MatchedPassivesSumToSimplifiedPlant) {
    const auto p = matched();
    EXPECT_NEAR(p.R_i + p.R_g, 1.3, 1e-12);
    EXPECT_NEAR(p.L_i + p.L_g, 3.5e-3, 1e-15);
    EXPECT_NEAR(p.R_i, 1.0, 1e-12);
    EXPECT_NEAR(p.L_i, 2.5e-3, 1e-15);
    EXPECT_NO_THROW(p.validate());
}

TEST(FullOrder, LoopShapingFormulas) {
    FullOrderParams p;
    LoopShaping s;
    s.current_bandwidth = 1000.0;
    s.voltage_ratio = 0.1;
    s.voltage_zero_ratio = 0.2;
    s.pll_natural = 50.0;
    s.pll_damping = 0.5;
    apply_loop_shaping(p, s);
    EXPECT_DOUBLE_EQ(p.k_pi, p.L_i * 1000.0);
    EXPECT_DOUBLE_EQ(p.k_ii, p.R_i * 1000.0);
    EXPECT_DOUBLE_EQ(p.k_pv, p.C * 100.0);
    EXPECT_DOUBLE_EQ(p.k_iv, p.C * 100.0 * 0.2 * 100.0);
    EXPECT_NEAR(p.k_p_pll, 2.0 * 0.5 * 50.0 / (std::sqrt(2.0) * p.E), 1e-15);
    EXPECT_NEAR(p.k_i_pll, 2500.0 / (std::sqrt(2.0) * p.E), 1e-12);
}

TEST(FullOrder, ValidateRejectsBadParameters) {
    auto p = matched();
    p.C = 0.0;
    EXPECT_THROW(p.validate(), DomainError);
    p = matched();
    p.k_pi = -1.0;
    EXPECT_THROW(p.validate(), DomainError);
    p = matched();
    const FullOrderState x0;
    EXPECT_THROW(integrate_fullorder(x0, p, Mat2::Zero(), {}, 0.0, 1e-6), PreconditionError);
    EXPECT_THROW(integrate_fullorder(x0, p, Mat2::Zero(), {}, 1e-3, 0.0), PreconditionError);
}

TEST(FullOrder, StateArrayRoundTrip) {
    FullOrderState x;
    auto a = x.to_array();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 + static_cast<double>(i);
    const auto y = FullOrderState::from_array(a);
    EXPECT_EQ(y.to_array(), a);
    EXPECT_EQ(y.delta_pll, 0.5);
    EXPECT_EQ(y.i_gq, 11.5);
}

TEST(FullOrder, PowerMappingMatchesSimplifiedAtNominalVoltage) {
    const auto simple = oracle::nominal_params();
    for (const auto& [P, Q] : {std::pair{775.0, -775.0}, std::pair{-300.0, 120.0}, std::pair{0.0, 0.0}}) {
        const Vec2 i = power_to_current_at(P, Q, simple.V_nom, 0.0);
        const State s = power_to_current(P, Q, simple);
        EXPECT_NEAR(i[0], s.i_d, 1e-12);
        EXPECT_NEAR(i[1], s.i_q, 1e-12);
    }
}

TEST(FullOrder, PowerFlowDeliversRequestedPower) {
    const auto p = matched();
    for (const auto& [P, Q] : {std::pair{775.0, -775.0}, std::pair{400.0, 200.0}, std::pair{-500.0, 0.0}}) {
        const auto pf = solve_power_flow(P, Q, p);
        // [P; Q] = 3/sqrt2 [Vd, Vq; Vq, -Vd] I, the inverse of the current mapping.
        const double vd = pf.v_star * std::cos(pf.delta_star), vq = pf.v_star * std::sin(pf.delta_star);
        const double k = 3.0 / std::sqrt(2.0);
        EXPECT_NEAR(k * (vd * pf.i_grid[0] + vq * pf.i_grid[1]), P, 1e-8);
        EXPECT_NEAR(k * (vq * pf.i_grid[0] - vd * pf.i_grid[1]), Q, 1e-8);
        // The bus voltage is the one that drives this current into the grid.
        const auto [v, d] = pcc_voltage_for(pf.i_grid, p);
        EXPECT_NEAR(v, pf.v_star, 1e-9);
        EXPECT_NEAR(d, pf.delta_star, 1e-12);
    }
    const auto pf = solve_power_flow(775.0, -775.0, p);
    EXPECT_GT(pf.delta_star, 0.0);
    EXPECT_THROW(solve_power_flow(1e7, 0.0, p), SolverError);
    EXPECT_THROW(solve_power_flow(std::nan(""), 0.0, p), DomainError);
}

TEST(FullOrder, EquilibriumHasZeroDerivative) {
    const auto p = matched();
    const Mat2 K = reference_fitted_gain().K;
    for (const auto& [P, Q] : {std::pair{0.0, 0.0}, std::pair{400.0, -300.0}, std::pair{-200.0, 500.0}}) {
        const auto x = fullorder_equilibrium(P, Q, p);
        const auto ref = reference_from_power(P, Q, p);
        const auto dx = fullorder_derivative(x, p, K, ref).to_array();
        // Scale of each derivative: the individual terms, e.g. E / L_g for currents.
        const double scale = std::sqrt(2.0) * p.E / p.L_g;
        for (double v : dx) EXPECT_LT(std::abs(v), 1e-9 * scale);
        const auto traj = integrate_fullorder(x, p, K, ref, 0.01, 1e-6, 0.01);
        EXPECT_LT(max_abs_diff(traj.final_state(), x), 1e-8 * (1.0 + std::sqrt(2.0) * p.E));
    }
}

TEST(FullOrder, ZeroStepStaysAtRest) {
    const auto p = matched();
    const Mat2 K = reference_fitted_gain().K;
    const auto cmp = compare_models(p, oracle::nominal_params(), K, PowerStep{0.0, 0.0, 0.0, 0.0}, {0.01, 1e-6, 0.02});
    EXPECT_LT(cmp.max_discrepancy, 1e-9);
    EXPECT_LT(cmp.max_mag_full, 1e-9);
    EXPECT_EQ(cmp.max_mag_simplified, 0.0);
}

TEST(FullOrder, GridCurrentPerturbationReachesPllAcceleration) {
    // delta_pll'' = k_i Pi' + k_p W_q' and W_q' contains -I_gq / C.
    const auto p = matched();
    const Mat2 K = reference_fitted_gain().K;
    const auto ref = reference_from_power(300.0, 0.0, p);
    auto x = fullorder_equilibrium(300.0, 0.0, p);
    auto accel = [&](const FullOrderState& s) {
        const auto d = fullorder_derivative(s, p, K, ref);
        return p.k_i_pll * d.pi_pll + p.k_p_pll * d.w_q;
    };
    const double a0 = accel(x);
    x.i_gq += 0.1;
    const double a1 = accel(x);
    EXPECT_NEAR(a1 - a0, -p.k_p_pll * 0.1 / p.C, 1e-6 * std::abs(p.k_p_pll * 0.1 / p.C));
}

TEST(FullOrder, SignalsReportSaturatedReference) {
    const auto p = matched();
    const auto ref = reference_from_power(775.0, -775.0, p);
    const auto x = fullorder_equilibrium(0.0, 0.0, p);
    FullOrderSignals sig;
    fullorder_derivative(x, p, reference_fitted_gain().K, ref, &sig);
    EXPECT_LE(sig.i_ref_sat.norm(), p.i_max * (1.0 + 1e-12));
    EXPECT_NEAR(sig.omega_ref, p.omega_nom, 1e-9);
}

TEST(FullOrder, Rk4IsFourthOrderOnSmoothSegment) {
    const auto p = matched();
    const Mat2 K = reference_fitted_gain().K;
    const auto x0 = fullorder_equilibrium(0.0, 0.0, p);
    const auto ref = reference_from_power(60.0, 20.0, p);
    const double t_end = 2e-3;
    auto end = [&](double h) { return integrate_fullorder(x0, p, K, ref, t_end, h, t_end).final_state(); };
    const auto a = end(4e-6), b = end(2e-6), c = end(1e-6);
    const double e1 = max_abs_diff(a, b), e2 = max_abs_diff(b, c);
    ASSERT_GT(e2, 0.0);
    EXPECT_GT(e1 / e2, 12.0);
    EXPECT_LT(e1 / e2, 20.0);
}

TEST(FullOrder, DivergenceIsReported) {
    auto p = matched();
    p.k_pi = 1e9; // far beyond what a 1 us explicit step can integrate
    const auto x0 = fullorder_equilibrium(0.0, 0.0, p);
    EXPECT_THROW(integrate_fullorder(x0, p, Mat2::Zero(), reference_from_power(100.0, 0.0, p), 0.01, 1e-6),
                 SolverError);
}

TEST(FullOrder, SettlingTimeOfSimpleSignals) {
    std::vector<double> t;
    std::vector<Vec2> y;
    for (int i = 0; i <= 100; ++i) {
        t.push_back(0.01 * i);
        y.push_back(Vec2(i < 30 ? 0.0 : 1.0, 0.0));
    }
    EXPECT_NEAR(settling_time(t, y, 0.02), 0.29, 1e-12);
    EXPECT_EQ(settling_time({}, {}, 0.02), 0.0);
}

TEST(FullOrder, ComparisonRejectsMismatchedPassives) {
    auto p = matched();
    p.R_g += 0.1;
    EXPECT_THROW(compare_models(p, oracle::nominal_params(), Mat2::Zero(), PowerStep{}), PreconditionError);
}

TEST(FullOrder, PublishedFitStepTracksSimplifiedModel) {
    const auto p = matched();
    const auto simple = oracle::nominal_params();
    const Mat2 K = reference_fitted_gain().K;
    const auto cmp = compare_models(p, simple, K, PowerStep{0.0, 0.0, 775.0, -775.0});
    EXPECT_LE(cmp.steady_state_offset_rel, 0.05);
    EXPECT_LE(cmp.settle_full, 2.0 * cmp.settle_simplified);
    EXPECT_GT(cmp.settle_simplified, 0.0);
    EXPECT_LE(cmp.max_mag_simplified, simple.I_max * (1.0 + 1e-12));
    EXPECT_LE(cmp.overshoot_full, 0.05 * simple.I_max);
    EXPECT_EQ(cmp.t.size(), cmp.simplified.size());
    EXPECT_EQ(cmp.t.size(), cmp.full_grid.size());
    const auto x0 = fullorder_equilibrium(0.0, 0.0, p);
    EXPECT_LT(rk4_halving_difference(x0, p, K, reference_from_power(775.0, -775.0, p), 0.05, 1e-6), 1e-7);
}
