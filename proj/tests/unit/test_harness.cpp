#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace maglim;

namespace {

const LinearPlant kPlant = build_plant(oracle::nominal_params());

std::string out_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("maglim_harness_" + name);
    std::filesystem::remove_all(p);
    return p.string();
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.grid.radii = {0.0, 3.0};
    c.grid.angles = {0.0, std::numbers::pi};
    c.grid.angle_offset = std::numbers::pi / 4.0;
    c.seed = 3;
    return c;
}

} // namespace

TEST(Harness, LinspaceEndpoints) {
    const auto v = linspace(0.0, 4.167, 3);
    ASSERT_EQ(v.size(), 3u);
    EXPECT_EQ(v[0], 0.0);
    EXPECT_DOUBLE_EQ(v[1], 4.167 / 2.0);
    EXPECT_EQ(v[2], 4.167);
    EXPECT_THROW(linspace(0.0, 1.0, 1), PreconditionError);
    EXPECT_THROW(linspace(1.0, 1.0, 3), PreconditionError);
}

TEST(Harness, ReferenceGridHasTwelvePointsAnd144Cases) {
    const auto grid = build_grid(reference_grid(4.167));
    ASSERT_EQ(grid.size(), 12u);
    EXPECT_EQ(cartesian_cases(grid, grid).size(), 144u);
    // Four origins, then radius i_max/2, then i_max, each at 45 + k*90 degrees.
    for (int k = 0; k < 4; ++k) EXPECT_EQ(grid[k], (State{0.0, 0.0}));
    EXPECT_NEAR(grid[8].i_d, 4.167 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(grid[8].i_q, 4.167 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(grid[8].i_d, 2.9465, 1e-4);
    for (const auto& p : grid) EXPECT_LE(p.vec().norm(), 4.167 * (1.0 + 1e-15));

    auto spec = reference_grid(4.167);
    spec.dedupe_origin = true;
    EXPECT_EQ(build_grid(spec).size(), 9u);
}

TEST(Harness, GridValidation) {
    GridSpec g;
    g.radii = {-1.0};
    g.angles = {0.0};
    EXPECT_THROW(build_grid(g), DomainError);
    g.radii = {1.0};
    g.angles = {7.0};
    EXPECT_THROW(build_grid(g), DomainError);
}

TEST(Harness, DedupeMaskKeepsDistinctPairs) {
    const auto grid = build_grid(reference_grid(4.167));
    const auto cases = cartesian_cases(grid, grid);
    const auto mask = dedupe_mask(cases, grid, grid);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 81);
    EXPECT_EQ(cases[13].init_index, 1u);
    EXPECT_EQ(cases[13].ref_index, 1u);
}

TEST(Harness, BaselineStuckAndFitConvergesOnFigureCase) {
    const Case c{0, 0, 8, {0.0, 0.0}, {2.9465, 2.9465}};
    const auto w = reference_weights(kPlant);
    Trajectory tb;
    const auto rb = evaluate_case(kPlant, reference_baseline_gain(), "base", c, w, {}, &tb);
    EXPECT_TRUE(rb.flagged);
    EXPECT_TRUE(rb.stuck);
    EXPECT_FALSE(rb.converged);
    EXPECT_GT(rb.final_error, 1e-3);
    EXPECT_NEAR(tb.back().state.vec().norm(), kPlant.i_max, 1e-6);

    const auto rf = evaluate_case(kPlant, reference_fitted_gain(), "fit", c, w, {});
    EXPECT_FALSE(rf.stuck);
    EXPECT_TRUE(rf.converged);
}

TEST(Harness, ConfirmationOnlyClearsFlags) {
    // Without confirmation every flagged case counts as stuck.
    const auto grid = build_grid(reference_grid(4.167));
    const auto cases = cartesian_cases(grid, grid);
    EvaluationOptions strict;
    EvaluationOptions loose;
    loose.stuck.confirm = false;
    const auto w = reference_weights(kPlant);
    const auto with = evaluate_controller(kPlant, reference_fitted_gain(), "fit", cases, w, strict, 4);
    const auto without = evaluate_controller(kPlant, reference_fitted_gain(), "fit", cases, w, loose, 4);
    EXPECT_EQ(aggregate(with).stuck_count, 0u);
    EXPECT_EQ(aggregate(without).stuck_count, aggregate(without).flagged_count);
    EXPECT_EQ(aggregate(with).flagged_count, aggregate(without).flagged_count);
}

TEST(Harness, ParallelEvaluationMatchesSerial) {
    const auto grid = build_grid(reference_grid(4.167));
    const auto cases = cartesian_cases(grid, grid);
    const auto w = reference_weights(kPlant);
    const auto a = evaluate_controller(kPlant, reference_baseline_gain(), "base", cases, w, {}, 1);
    const auto b = evaluate_controller(kPlant, reference_baseline_gain(), "base", cases, w, {}, 6);
    EXPECT_EQ(cases_csv(a), cases_csv(b));
    const auto agg = aggregate(a);
    EXPECT_EQ(agg.n_cases, 144u);
    EXPECT_GE(agg.stuck_count, 10u);
}

TEST(Harness, CaseCostMatchesStoredTrajectory) {
    const auto w = reference_weights(kPlant);
    const auto grid = build_grid(reference_grid(4.167));
    for (std::size_t k : {1u, 20u, 77u, 143u}) {
        const auto cases = cartesian_cases(grid, grid);
        Trajectory t;
        const auto r = evaluate_case(kPlant, reference_fitted_gain(), "fit", cases[k], w, {}, &t);
        const auto reloaded = trajectory_from_csv(trajectory_to_csv(t));
        Trajectory with_ref = reloaded;
        with_ref.x_ref = cases[k].x_ref;
        with_ref.u_ref = equilibrium_input(kPlant, cases[k].x_ref);
        EXPECT_NEAR(trajectory_cost(with_ref, w.Q, w.R), r.cost, 1e-9 * std::max(1.0, r.cost));
    }
}

TEST(Harness, AggregateCountsAndMask) {
    std::vector<CaseResult> rs(4);
    rs[0].cost = 1.0;
    rs[1].cost = 3.0;
    rs[1].stuck = true;
    rs[1].flagged = true;
    rs[2].cost = 5.0;
    rs[2].converged = true;
    rs[3].cost = 7.0;
    const auto a = aggregate(rs);
    EXPECT_EQ(a.n_cases, 4u);
    EXPECT_DOUBLE_EQ(a.average_cost, 4.0);
    EXPECT_EQ(a.stuck_count, 1u);
    EXPECT_EQ(a.converged_count, 1u);
    const std::vector<bool> mask{true, false, true, false};
    EXPECT_DOUBLE_EQ(aggregate(rs, &mask).average_cost, 3.0);
    EXPECT_EQ(aggregate({}).average_cost, 0.0);
}

TEST(Harness, PlotCsvLayout) {
    EXPECT_EQ(plot_error_csv({}, {}), "t\n");
    EXPECT_THROW(plot_error_csv({Trajectory{}}, {}), PreconditionError);

    const State xr{2.9465, 2.9465};
    const auto ur = equilibrium_input(kPlant, xr);
    const auto a = simulate(kPlant, reference_fitted_gain(), {0.0, 0.0}, xr, ur);
    SimulateOptions so;
    so.stop.max_steps = 50;
    const auto b = simulate(kPlant, reference_baseline_gain(), {0.0, 0.0}, xr, ur, so);
    const std::string csv = plot_error_csv({a, b}, {"fit", "base"});
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "t,fit_abs_di_d,fit_abs_di_q,base_abs_di_d,base_abs_di_q");
    long prev = -1;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const long t = std::stol(line.substr(0, line.find(',')));
        EXPECT_GT(t, prev);
        prev = t;
        ++rows;
    }
    EXPECT_EQ(rows, std::max(a.size(), b.size()));
    const std::string in_csv = plot_input_csv({a}, {"fit"});
    EXPECT_EQ(in_csv.substr(0, in_csv.find('\n')), "t,fit_dv,fit_ddelta");
}

TEST(Harness, ConfigParsing) {
    const auto c = load_experiment_config(std::string(MAGLIM_CONFIG_DIR) + "/grid_experiment.cfg");
    EXPECT_EQ(c.seed, 1u);
    EXPECT_EQ(build_grid(c.grid).size(), 12u);
    EXPECT_EQ(c.mpc.horizon, 5u);
    EXPECT_EQ(c.r_multiplier, 5.0);
    EXPECT_EQ(c.q(1, 1), 0.1);
    EXPECT_EQ(c.baseline.design_dt, 1e-4);
    EXPECT_EQ(c.eval.stop.tol, 1e-5);
    const auto ref = build_grid(reference_grid(4.167));
    const auto got = build_grid(c.grid);
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_LT((ref[k].vec() - got[k].vec()).norm(), 1e-15);

    EXPECT_THROW(parse_experiment_config("[bogus]\nx = 1\n"), ParseError);
    EXPECT_THROW(parse_experiment_config("[mpc]\nhorizonn = 4\n"), ParseError);
    EXPECT_THROW(parse_experiment_config("[weights]\nrcost = 1, 2\n"), ParseError);
    EXPECT_THROW(parse_experiment_config("[thresholds]\nstop_tol = 0\n"), ParseError);
    const auto r = parse_experiment_config("[weights]\nrcost = 1, 0, 0, 2\nq = 1, 0, 0, 3\n");
    ASSERT_TRUE(r.r_cost);
    EXPECT_EQ((*r.r_cost)(1, 1), 2.0);
    EXPECT_EQ(r.q(1, 1), 3.0);
}

TEST(Harness, DegenerateOriginPipeline) {
    const auto cfg = load_experiment_config(std::string(MAGLIM_CONFIG_DIR) + "/origin.cfg");
    const auto dir = out_dir("origin");
    const auto res = run_full_experiment(cfg, dir, 1);
    EXPECT_EQ(res.cases.size(), 1u);
    EXPECT_TRUE(res.fit_certified);
    EXPECT_LT(res.gain_fit.K.norm(), 1e-12);
    for (const char* f : {"report.json", "cases.csv", "gain_fit.json", "gain_base.json", "dataset.csv", "fig2.csv",
                          "fig3.csv"})
        EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / f)) << f;
    const Gain reloaded = load_gain((std::filesystem::path(dir) / "gain_fit.json").string());
    EXPECT_TRUE(reloaded.certificate);
    EXPECT_TRUE(certify_gain(kPlant, reloaded.K).feasible);
}

TEST(Harness, PipelineIsDeterministic) {
    const auto cfg = small_config();
    const auto d1 = out_dir("det1"), d2 = out_dir("det2");
    const auto r1 = run_full_experiment(cfg, d1, 1);
    const auto r2 = run_full_experiment(cfg, d2, 4);
    for (const char* f : {"report.json", "cases.csv", "dataset.csv", "fig2.csv", "fig3.csv", "gain_fit.json"})
        EXPECT_EQ(read_file((std::filesystem::path(d1) / f).string()), read_file((std::filesystem::path(d2) / f).string()))
            << f;
    EXPECT_EQ(r1.cases.size(), 16u);
    EXPECT_EQ(r1.summaries.size(), 3u);

    // Every written gain reloads with its certificate report; the fitted one passes.
    const Gain fit = load_gain((std::filesystem::path(d1) / "gain_fit.json").string());
    ASSERT_TRUE(fit.certificate);
    EXPECT_TRUE(certify_gain(kPlant, fit.K).feasible);
    const auto base = Json::parse(read_file((std::filesystem::path(d1) / "gain_base.json").string()));
    EXPECT_TRUE(base["certificate"].contains("feasible"));

    // Per-case costs in cases.csv match the in-memory results.
    const auto report = Json::parse(read_file((std::filesystem::path(d1) / "report.json").string()));
    EXPECT_EQ(report["grid"]["cases"].get<std::size_t>(), 16u);
    EXPECT_TRUE(report["fit_certified"].get<bool>());
    EXPECT_FALSE(report.contains("failed_stage"));
}

TEST(Harness, StageFailureIsNamedAndPersisted) {
    auto cfg = small_config();
    cfg.fit.margin = 2.0;
    const auto dir = out_dir("fail");
    try {
        run_full_experiment(cfg, dir, 2);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "fit");
    }
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / "dataset.csv"));
    const auto report = Json::parse(read_file((std::filesystem::path(dir) / "report.json").string()));
    EXPECT_EQ(report["failed_stage"].get<std::string>(), "fit");
}
