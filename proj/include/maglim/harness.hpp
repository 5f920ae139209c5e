#pragma once

// End-to-end experiment: polar grids of initial states and references, the
// MPC dataset, the constrained fit, the LQR baseline, head-to-head closed-loop
// evaluation with stuck-case detection, and CSV/JSON artifacts.

#include "maglim/certify.hpp"
#include "maglim/error.hpp"
#include "maglim/fit.hpp"
#include "maglim/gain.hpp"
#include "maglim/io.hpp"
#include "maglim/lqr.hpp"
#include "maglim/mpc.hpp"
#include "maglim/plant.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maglim {

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// a + i (b - a) / (n - 1), i = 0..n-1.
inline std::vector<double> linspace(double a, double b, std::size_t n) {
    if (n < 2) throw PreconditionError("linspace: n must be >= 2");
    if (a == b) throw PreconditionError("linspace: endpoints must differ");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = a + static_cast<double>(i) * (b - a) / static_cast<double>(n - 1);
    return out;
}

struct GridSpec {
    std::vector<double> radii;
    std::vector<double> angles;
    double angle_offset = 0.0;
    bool dedupe_origin = false;

    void validate() const {
        for (double r : radii)
            if (!(std::isfinite(r) && r >= 0.0)) throw DomainError("GridSpec: radii must be finite and >= 0");
        for (double a : angles)
            if (!(std::isfinite(a) && a >= 0.0 && a < 2.0 * std::numbers::pi))
                throw DomainError("GridSpec: angles must lie in [0, 2pi)");
        if (!std::isfinite(angle_offset)) throw DomainError("GridSpec: angle_offset not finite");
    }
};

/// Three radii from 0 to i_max, four quarter-turn angles, rotated by pi/4.
inline GridSpec reference_grid(double i_max) {
    GridSpec g;
    g.radii = linspace(0.0, i_max, 3);
    g.angles = linspace(0.0, 2.0 * std::numbers::pi - 2.0 * std::numbers::pi / 4.0, 4);
    g.angle_offset = std::numbers::pi / 4.0;
    return g;
}

/// Radius-major list of (r cos(theta + offset), r sin(theta + offset)).
inline std::vector<State> build_grid(const GridSpec& spec) {
    spec.validate();
    std::vector<State> pts;
    bool have_origin = false;
    for (double r : spec.radii)
        for (double a : spec.angles) {
            if (r == 0.0) {
                if (spec.dedupe_origin && have_origin) continue;
                have_origin = true;
                pts.push_back({0.0, 0.0});
                continue;
            }
            pts.push_back({r * std::cos(a + spec.angle_offset), r * std::sin(a + spec.angle_offset)});
        }
    return pts;
}

struct Case {
    std::size_t index = 0;
    std::size_t init_index = 0;
    std::size_t ref_index = 0;
    State x_init;
    State x_ref;
};

/// Init-major Cartesian product, matching the dataset's trajectory ids.
inline std::vector<Case> cartesian_cases(const std::vector<State>& inits, const std::vector<State>& refs) {
    std::vector<Case> cases;
    cases.reserve(inits.size() * refs.size());
    for (std::size_t i = 0; i < inits.size(); ++i)
        for (std::size_t j = 0; j < refs.size(); ++j) cases.push_back({cases.size(), i, j, inits[i], refs[j]});
    return cases;
}

/// true for the first occurrence of each distinct point.
inline std::vector<bool> first_occurrence(const std::vector<State>& pts) {
    std::vector<bool> keep(pts.size(), true);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = 0; j < i && keep[i]; ++j)
            if (pts[j] == pts[i]) keep[i] = false;
    return keep;
}

// ---------------------------------------------------------------------------
// Closed-loop evaluation
// ---------------------------------------------------------------------------

/// A run is flagged when the stop rule fired with |x - x_ref| > error_factor *
/// stop_tol and |x| within boundary_tol * i_max of the circle. With `confirm`
/// set, a flagged run only counts as stuck if continuing the closed loop from
/// its last state for up to confirm_steps never brings the error under that
/// threshold (the stop rule also fires on slow boundary approaches).
struct StuckRule {
    double error_factor = 100.0;
    double boundary_tol = 1e-6;
    bool confirm = true;
    std::size_t confirm_steps = 200000;
};

struct EvaluationOptions {
    StopRule stop;
    StuckRule stuck;
};

struct CaseResult {
    std::size_t case_index = 0;
    std::size_t init_index = 0;
    std::size_t ref_index = 0;
    State x_init;
    State x_ref;
    std::string controller;
    bool converged = false; ///< stop rule fired and not stuck
    bool flagged = false;   ///< met the boundary/error test at termination
    bool stuck = false;
    double cost = 0.0;
    std::size_t settle_steps = 0;
    std::size_t steps = 0; ///< last recorded step index
    double final_error = 0.0;
};

inline bool boundary_flag(const Trajectory& traj, double i_max, const StopRule& stop, const StuckRule& rule) {
    if (!traj.converged) return false;
    const Vec2 x = traj.back().state.vec();
    const double err = (x - traj.x_ref.vec()).norm();
    return err > rule.error_factor * stop.tol && std::abs(x.norm() - i_max) <= rule.boundary_tol * i_max;
}

/// Continues the static-gain closed loop from `x`; true if the error stays
/// above `threshold` (including reaching an exact fixed point).
inline bool persists_off_reference(const LinearPlant& plant, const Mat2& K, Vec2 x, const State& x_ref,
                                   const Input& u_ref, double threshold, std::size_t max_steps) {
    const Vec2 xr = x_ref.vec();
    const Vec2 ur = u_ref.vec();
    for (std::size_t k = 0; k < max_steps; ++k) {
        if ((x - xr).norm() <= threshold) return false;
        const Vec2 next = saturate(plant.A * x + plant.B * (ur - K * (x - xr)), plant.i_max);
        if (next == x) return true;
        x = next;
    }
    return (x - xr).norm() > threshold;
}

inline CaseResult evaluate_case(const LinearPlant& plant, const Gain& gain, const std::string& id, const Case& c,
                                const LqrWeights& weights, const EvaluationOptions& opt,
                                Trajectory* keep = nullptr) {
    const Input u_ref = equilibrium_input(plant, c.x_ref);
    SimulateOptions so;
    so.stop = opt.stop;
    Trajectory traj = simulate(plant, gain, c.x_init, c.x_ref, u_ref, so);

    CaseResult r;
    r.case_index = c.index;
    r.init_index = c.init_index;
    r.ref_index = c.ref_index;
    r.x_init = c.x_init;
    r.x_ref = c.x_ref;
    r.controller = id;
    r.cost = trajectory_cost(traj, weights.Q, weights.R);
    r.settle_steps = traj.settle_step;
    r.steps = traj.back().t;
    r.final_error = (traj.back().state.vec() - c.x_ref.vec()).norm();
    r.flagged = boundary_flag(traj, plant.i_max, opt.stop, opt.stuck);
    r.stuck = r.flagged;
    if (r.flagged && opt.stuck.confirm)
        r.stuck = persists_off_reference(plant, gain.K, traj.back().state.vec(), c.x_ref, u_ref,
                                         opt.stuck.error_factor * opt.stop.tol, opt.stuck.confirm_steps);
    r.converged = traj.converged && !r.stuck;
    if (keep) *keep = std::move(traj);
    return r;
}

inline std::vector<CaseResult> evaluate_controller(const LinearPlant& plant, const Gain& gain, const std::string& id,
                                                   const std::vector<Case>& cases, const LqrWeights& weights,
                                                   const EvaluationOptions& opt = {}, std::size_t jobs = 1) {
    if (cases.empty()) throw PreconditionError("evaluate_controller: no cases");
    std::vector<CaseResult> out(cases.size());
    parallel_for(cases.size(), jobs,
                 [&](std::size_t k) { out[k] = evaluate_case(plant, gain, id, cases[k], weights, opt); });
    return out;
}

/// Records for closed-loop MPC trajectories (already simulated). Stuck uses
/// the termination test only: there is no static loop to continue.
inline std::vector<CaseResult> mpc_case_results(const std::vector<Trajectory>& trajs, const std::vector<Case>& cases,
                                                const LinearPlant& plant, const LqrWeights& weights,
                                                const EvaluationOptions& opt) {
    std::vector<CaseResult> out;
    for (std::size_t k = 0; k < cases.size() && k < trajs.size(); ++k) {
        const auto& traj = trajs[k];
        if (traj.empty()) continue;
        CaseResult r;
        r.case_index = cases[k].index;
        r.init_index = cases[k].init_index;
        r.ref_index = cases[k].ref_index;
        r.x_init = cases[k].x_init;
        r.x_ref = cases[k].x_ref;
        r.controller = "mpc";
        r.cost = trajectory_cost(traj, weights.Q, weights.R);
        r.settle_steps = traj.settle_step;
        r.steps = traj.back().t;
        r.final_error = (traj.back().state.vec() - cases[k].x_ref.vec()).norm();
        r.flagged = boundary_flag(traj, plant.i_max, opt.stop, opt.stuck);
        r.stuck = r.flagged;
        r.converged = traj.converged && !r.stuck;
        out.push_back(r);
    }
    return out;
}

struct Aggregate {
    std::size_t n_cases = 0;
    double average_cost = 0.0;
    std::size_t stuck_count = 0;
    std::size_t flagged_count = 0;
    std::size_t converged_count = 0;
};

struct ControllerSummary {
    std::string controller;
    Aggregate all;
    Aggregate deduped; ///< over cases whose init and ref points are distinct grid points
};

inline Aggregate aggregate(const std::vector<CaseResult>& rs, const std::vector<bool>* mask = nullptr) {
    Aggregate a;
    double total = 0.0;
    for (std::size_t k = 0; k < rs.size(); ++k) {
        if (mask && !(*mask)[k]) continue;
        ++a.n_cases;
        total += rs[k].cost;
        a.stuck_count += rs[k].stuck ? 1 : 0;
        a.flagged_count += rs[k].flagged ? 1 : 0;
        a.converged_count += rs[k].converged ? 1 : 0;
    }
    a.average_cost = a.n_cases ? total / static_cast<double>(a.n_cases) : 0.0;
    return a;
}

/// Mask over init-major cases keeping only first occurrences of both points.
inline std::vector<bool> dedupe_mask(const std::vector<Case>& cases, const std::vector<State>& inits,
                                     const std::vector<State>& refs) {
    const auto ki = first_occurrence(inits);
    const auto kr = first_occurrence(refs);
    std::vector<bool> m(cases.size());
    for (std::size_t k = 0; k < cases.size(); ++k) m[k] = ki[cases[k].init_index] && kr[cases[k].ref_index];
    return m;
}

inline ControllerSummary summarize(const std::string& id, const std::vector<CaseResult>& rs,
                                   const std::vector<bool>& mask) {
    return {id, aggregate(rs), aggregate(rs, &mask)};
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

/// Per-step value of each trajectory, holding the final record after a
/// trajectory ends.
template <typename Fn>
inline std::string wide_csv(const std::vector<Trajectory>& trajs, const std::vector<std::string>& labels,
                     const std::vector<std::string>& suffixes, Fn&& values) {
    if (trajs.size() != labels.size()) throw PreconditionError("emit_plotdata: one label per trajectory");
    std::string out = "t";
    for (const auto& l : labels)
        for (const auto& s : suffixes) out += "," + l + "_" + s;
    out += "\n";
    std::size_t len = 0;
    for (const auto& t : trajs) len = std::max(len, t.size());
    for (std::size_t k = 0; k < len; ++k) {
        out += std::to_string(k);
        for (const auto& t : trajs) {
            const auto& rec = t.records[std::min(k, t.size() - 1)];
            for (double v : values(t, rec)) out += "," + fmt_double(v);
        }
        out += "\n";
    }
    return out;
}

/// |dI_d|, |dI_q| per controller against the step index.
inline std::string plot_error_csv(const std::vector<Trajectory>& trajs, const std::vector<std::string>& labels) {
    return wide_csv(trajs, labels, {"abs_di_d", "abs_di_q"}, [](const Trajectory& t, const TrajectoryRecord& r) {
        const Vec2 e = r.state.vec() - t.x_ref.vec();
        return std::array<double, 2>{std::abs(e[0]), std::abs(e[1])};
    });
}

/// dV, d(delta) relative to the equilibrium input per controller.
inline std::string plot_input_csv(const std::vector<Trajectory>& trajs, const std::vector<std::string>& labels) {
    return wide_csv(trajs, labels, {"dv", "ddelta"}, [](const Trajectory& t, const TrajectoryRecord& r) {
        const Vec2 du = r.input.vec() - t.u_ref.vec();
        return std::array<double, 2>{du[0], du[1]};
    });
}

inline void emit_plotdata(const std::vector<Trajectory>& trajs, const std::vector<std::string>& labels,
                          const std::string& error_path, const std::string& input_path) {
    write_file(error_path, plot_error_csv(trajs, labels));
    write_file(input_path, plot_input_csv(trajs, labels));
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    PlantParams plant;
    Mat2 q = Vec2(1.0, 0.1).asDiagonal();
    double r_multiplier = 5.0;  ///< R_cost = r_multiplier * B unless r_cost is set
    std::optional<Mat2> r_cost;
    GridSpec grid;
    MpcOptions mpc;
    FitOptions fit;
    BaselineRecipe baseline;
    EvaluationOptions eval;
    std::optional<State> fig_init; ///< default: origin
    std::optional<State> fig_ref;  ///< default: outermost grid point at angle 0
    std::uint64_t seed = 0;

    ExperimentConfig() { grid = reference_grid(plant.I_max); }

    LqrWeights weights(const LinearPlant& p) const {
        LqrWeights w;
        w.Q = q;
        w.R = r_cost ? *r_cost : Mat2(r_multiplier * p.B);
        return w;
    }
};

/// "5B" style multiple of B, or four numbers (row-major).
inline std::pair<std::optional<double>, std::optional<Mat2>> parse_rcost(const std::string& text,
                                                                         const std::string& what) {
    const std::string s = trim(text);
    if (!s.empty() && (s.back() == 'B' || s.back() == 'b')) {
        const std::string num = trim(std::string_view(s).substr(0, s.size() - 1));
        return {num.empty() ? 1.0 : parse_double(num, what), std::nullopt};
    }
    const auto v = parse_list(s, what);
    if (v.size() != 4) throw ParseError(what + ": expected '<k>B' or four numbers");
    Mat2 m;
    m << v[0], v[1], v[2], v[3];
    return {std::nullopt, m};
}

/// Two numbers (diagonal) or four (row-major).
inline Mat2 parse_q(const std::string& text, const std::string& what) {
    const auto v = parse_list(text, what);
    Mat2 m = Mat2::Zero();
    if (v.size() == 2) {
        m(0, 0) = v[0];
        m(1, 1) = v[1];
    } else if (v.size() == 4) {
        m << v[0], v[1], v[2], v[3];
    } else {
        throw ParseError(what + ": expected two or four numbers");
    }
    return m;
}

inline ExperimentConfig experiment_config_from(const KeyValueFile& f) {
    f.reject_unknown_sections({"", "plant", "weights", "grid", "mpc", "fit", "baseline", "thresholds"});
    ExperimentConfig c;
    c.seed = f.get_u64("", "seed", c.seed);
    f.reject_unused("");

    auto& p = c.plant;
    p.R_ohm = f.get_double("plant", "R_ohm", p.R_ohm);
    p.L_H = f.get_double("plant", "L_H", p.L_H);
    p.E_V = f.get_double("plant", "E_V", p.E_V);
    p.omega_nom = f.get_double("plant", "omega_nom_rad_s", p.omega_nom);
    p.V_nom = f.get_double("plant", "V_nom_V", p.V_nom);
    p.dt = f.get_double("plant", "dt_s", p.dt);
    p.I_max = f.get_double("plant", "I_max_A", p.I_max);
    p.S_nom = f.get_double("plant", "S_nom_VA", p.S_nom);
    p.I_nom = f.get_double("plant", "I_nom_A", p.I_nom);
    f.reject_unused("plant");
    p.validate();

    if (auto q = f.get_string("weights", "q")) c.q = parse_q(*q, f.context("weights", "q"));
    if (auto r = f.get_string("weights", "rcost")) {
        auto [mult, mat] = parse_rcost(*r, f.context("weights", "rcost"));
        if (mult) c.r_multiplier = *mult;
        c.r_cost = mat;
    }
    f.reject_unused("weights");

    c.grid = reference_grid(p.I_max);
    if (auto r = f.get_list("grid", "radii")) {
        c.grid.radii = *r;
    } else {
        const double r_max = f.get_double("grid", "r_max", p.I_max);
        c.grid.radii = linspace(0.0, r_max, f.get_u64("grid", "n_radii", 3));
    }
    if (auto a = f.get_list("grid", "angles")) {
        c.grid.angles = *a;
    } else {
        const auto n = f.get_u64("grid", "n_angles", 4);
        const double two_pi = 2.0 * std::numbers::pi;
        c.grid.angles = linspace(0.0, two_pi - two_pi / static_cast<double>(n), n);
    }
    c.grid.angle_offset = f.get_double("grid", "angle_offset", c.grid.angle_offset);
    c.grid.dedupe_origin = f.get_bool("grid", "dedupe_origin", false);
    if (auto s = f.get_string("grid", "fig_x_init")) c.fig_init = State::from(parse_pair(*s, "grid.fig_x_init"));
    if (auto s = f.get_string("grid", "fig_x_ref")) c.fig_ref = State::from(parse_pair(*s, "grid.fig_x_ref"));
    f.reject_unused("grid");
    c.grid.validate();

    c.mpc.horizon = f.get_u64("mpc", "horizon", c.mpc.horizon);
    c.mpc.shooting.random_starts = f.get_u64("mpc", "random_starts", c.mpc.shooting.random_starts);
    c.mpc.shooting.grad_tol = f.get_double("mpc", "grad_tol", c.mpc.shooting.grad_tol);
    c.mpc.shooting.max_iter = f.get_u64("mpc", "max_iter", c.mpc.shooting.max_iter);
    c.seed = f.get_u64("mpc", "seed", c.seed);
    f.reject_unused("mpc");

    c.fit.margin = f.get_double("fit", "margin", c.fit.margin);
    c.fit.rel_tol = f.get_double("fit", "rel_tol", c.fit.rel_tol);
    c.fit.window = f.get_u64("fit", "window", c.fit.window);
    c.fit.max_iter = f.get_u64("fit", "max_iter", c.fit.max_iter);
    f.reject_unused("fit");

    c.baseline.design_dt = f.get_double("baseline", "design_dt_s", c.baseline.design_dt);
    c.baseline.r_multiplier = f.get_double("baseline", "r_multiplier", c.r_multiplier);
    c.baseline.q_diag = c.q.diagonal();
    f.reject_unused("baseline");

    auto& st = c.eval.stop;
    st.tol = f.get_double("thresholds", "stop_tol", st.tol);
    st.window = f.get_u64("thresholds", "stop_window", st.window);
    st.max_steps = f.get_u64("thresholds", "max_steps", st.max_steps);
    auto& sk = c.eval.stuck;
    sk.error_factor = f.get_double("thresholds", "stuck_error_factor", sk.error_factor);
    sk.boundary_tol = f.get_double("thresholds", "stuck_boundary_tol", sk.boundary_tol);
    sk.confirm = f.get_bool("thresholds", "stuck_confirm", sk.confirm);
    sk.confirm_steps = f.get_u64("thresholds", "stuck_confirm_steps", sk.confirm_steps);
    f.reject_unused("thresholds");
    if (!(st.tol > 0.0) || st.window < 1 || st.max_steps < 1)
        throw ParseError("thresholds: stop_tol must be > 0, stop_window and max_steps >= 1");
    c.mpc.stop = st;
    return c;
}

inline ExperimentConfig parse_experiment_config(std::string_view text, const std::string& origin = "<input>") {
    return experiment_config_from(KeyValueFile::parse(text, origin));
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Failure of one pipeline stage.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<State> grid;
    std::vector<Case> cases;
    std::size_t dataset_samples = 0;
    std::size_t mpc_unconverged = 0;
    std::vector<CaseFailure> dataset_failures;
    FitDiagnostics fit_diag;
    Gain gain_fit;
    Gain gain_base;
    Gain gain_dlqr; ///< discrete Riccati gain with the same weights, for reference
    std::vector<CaseResult> results; ///< base, fit, mpc blocks in case order
    std::vector<ControllerSummary> summaries;
    std::vector<Trajectory> fig_trajectories; ///< base, fit, mpc
    std::vector<std::string> fig_labels;
    State fig_init;
    State fig_ref;
    bool fit_certified = false;
};

inline Json aggregate_json(const Aggregate& a) {
    Json j;
    j["n_cases"] = a.n_cases;
    j["average_cost"] = a.average_cost;
    j["stuck_count"] = a.stuck_count;
    j["flagged_count"] = a.flagged_count;
    j["converged_count"] = a.converged_count;
    return j;
}

inline Json config_json(const ExperimentConfig& c) {
    Json j;
    j["plant"] = {{"R_ohm", c.plant.R_ohm},         {"L_H", c.plant.L_H},     {"E_V", c.plant.E_V},
                  {"omega_nom_rad_s", c.plant.omega_nom}, {"V_nom_V", c.plant.V_nom}, {"dt_s", c.plant.dt},
                  {"I_max_A", c.plant.I_max},       {"S_nom_VA", c.plant.S_nom}, {"I_nom_A", c.plant.I_nom}};
    j["weights"] = {{"Q", mat_to_json(c.q)}};
    if (c.r_cost)
        j["weights"]["R_cost"] = mat_to_json(*c.r_cost);
    else
        j["weights"]["R_cost_multiple_of_B"] = c.r_multiplier;
    j["grid"] = {{"radii", c.grid.radii},
                 {"angles", c.grid.angles},
                 {"angle_offset", c.grid.angle_offset},
                 {"dedupe_origin", c.grid.dedupe_origin}};
    j["mpc"] = {{"horizon", c.mpc.horizon},
                {"random_starts", c.mpc.shooting.random_starts},
                {"grad_tol", c.mpc.shooting.grad_tol},
                {"max_iter", c.mpc.shooting.max_iter},
                {"seed", c.seed}};
    j["fit"] = {{"margin", c.fit.margin}, {"rel_tol", c.fit.rel_tol}, {"window", c.fit.window}};
    j["baseline"] = {{"design_dt_s", c.baseline.design_dt}, {"r_multiplier", c.baseline.r_multiplier}};
    j["thresholds"] = {{"stop_tol", c.eval.stop.tol},
                       {"stop_window", c.eval.stop.window},
                       {"max_steps", c.eval.stop.max_steps},
                       {"stuck_error_factor", c.eval.stuck.error_factor},
                       {"stuck_boundary_tol", c.eval.stuck.boundary_tol},
                       {"stuck_confirm", c.eval.stuck.confirm},
                       {"stuck_confirm_steps", c.eval.stuck.confirm_steps}};
    return j;
}

/// report.json content. Contains no timings, so identical inputs give
/// identical bytes.
inline Json report_json(const ExperimentResult& r, const LinearPlant& plant) {
    Json j;
    j["config"] = config_json(r.config);
    j["grid"] = {{"points", r.grid.size()}, {"cases", r.cases.size()}};
    j["dataset"] = {{"samples", r.dataset_samples},
                    {"failed_cases", r.dataset_failures.size()},
                    {"unconverged_ocp_solves", r.mpc_unconverged}};
    j["fit"] = {{"projected", r.fit_diag.projected},
                {"iterations", r.fit_diag.iterations},
                {"restarts", r.fit_diag.restarts},
                {"objective", r.fit_diag.objective},
                {"objective_unconstrained", r.fit_diag.objective_unconstrained},
                {"K_unconstrained", mat_to_json(r.fit_diag.K_unconstrained)}};
    j["gains"] = {{"fit", gain_to_json(r.gain_fit, plant)},
                  {"base", gain_to_json(r.gain_base, plant)},
                  {"discrete_lqr", gain_to_json(r.gain_dlqr, plant)}};
    Json ctrl = Json::object();
    for (const auto& s : r.summaries)
        ctrl[s.controller] = {{"all", aggregate_json(s.all)}, {"deduped", aggregate_json(s.deduped)}};
    j["controllers"] = ctrl;
    const double cb = r.summaries.size() > 0 ? r.summaries[0].all.average_cost : 0.0;
    const double cf = r.summaries.size() > 1 ? r.summaries[1].all.average_cost : 0.0;
    j["cost_ratio_fit_over_base"] = cb > 0.0 ? cf / cb : 0.0;
    j["fig_case"] = {{"x_init", {r.fig_init.i_d, r.fig_init.i_q}}, {"x_ref", {r.fig_ref.i_d, r.fig_ref.i_q}}};
    j["fit_certified"] = r.fit_certified;
    return j;
}

inline std::string cases_csv(const std::vector<CaseResult>& rs) {
    std::string out = "case,controller,x_init_d,x_init_q,x_ref_d,x_ref_q,converged,stuck,flagged,cost,settle_steps,"
                      "steps,final_error\n";
    for (const auto& r : rs) {
        out += std::to_string(r.case_index) + "," + r.controller + "," + fmt_double(r.x_init.i_d) + "," +
               fmt_double(r.x_init.i_q) + "," + fmt_double(r.x_ref.i_d) + "," + fmt_double(r.x_ref.i_q) + "," +
               (r.converged ? "1" : "0") + "," + (r.stuck ? "1" : "0") + "," + (r.flagged ? "1" : "0") + "," +
               fmt_double(r.cost) + "," + std::to_string(r.settle_steps) + "," + std::to_string(r.steps) + "," +
               fmt_double(r.final_error) + "\n";
    }
    return out;
}

/// Runs the pipeline and writes its artifacts into `out_dir` (created if
/// needed). Each artifact is written as soon as its stage finishes; a failing
/// stage throws StageError after recording the failure in report.json.
inline ExperimentResult run_full_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                            std::size_t jobs = 1) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

    ExperimentResult res;
    res.config = cfg;
    const LinearPlant plant = build_plant(cfg.plant);
    const LqrWeights weights = cfg.weights(plant);

    std::string stage;
    try {
        stage = "grid";
        res.grid = build_grid(cfg.grid);
        if (res.grid.empty()) throw DomainError("grid is empty");
        res.cases = cartesian_cases(res.grid, res.grid);
        const auto mask = dedupe_mask(res.cases, res.grid, res.grid);

        stage = "dataset";
        MpcOptions mopt = cfg.mpc;
        mopt.stop = cfg.eval.stop;
        mopt.shooting.seed = cfg.seed;
        DatasetRun run = generate_dataset_detailed(plant, weights, res.grid, res.grid, mopt, jobs);
        res.dataset_samples = run.dataset.size();
        res.dataset_failures = run.failures;
        write_file(path("dataset.csv"), dataset_to_csv(run.dataset));
        if (!run.failures.empty())
            throw SolverError(std::to_string(run.failures.size()) + " MPC case(s) failed, first: " +
                              run.failures.front().message);

        stage = "fit";
        if (run.dataset.empty()) {
            // Zero objective: the minimum-norm minimizer is K = 0.
            res.gain_fit = issue_certificate(plant, Gain(Mat2::Zero()));
        } else {
            FitResult fr = fit_gain_detailed(plant, run.dataset, cfg.fit);
            res.gain_fit = fr.gain;
            res.fit_diag = std::move(fr.diag);
            res.fit_diag.history.clear();
        }
        res.fit_certified = certify_gain(plant, res.gain_fit.K).feasible && res.gain_fit.certificate.has_value();
        write_file(path("gain_fit.json"), gain_to_json(res.gain_fit, plant).dump(2) + "\n");

        stage = "baseline";
        res.gain_base = issue_certificate(plant, baseline_gain(cfg.plant, cfg.baseline));
        res.gain_dlqr = issue_certificate(plant, lqr_gain(plant, weights));
        write_file(path("gain_base.json"), gain_to_json(res.gain_base, plant).dump(2) + "\n");

        stage = "evaluate";
        auto base = evaluate_controller(plant, res.gain_base, "base", res.cases, weights, cfg.eval, jobs);
        auto fit = evaluate_controller(plant, res.gain_fit, "fit", res.cases, weights, cfg.eval, jobs);
        auto mpc = mpc_case_results(run.trajectories, res.cases, plant, weights, cfg.eval);
        res.summaries = {summarize("base", base, mask), summarize("fit", fit, mask), summarize("mpc", mpc, mask)};
        res.results = std::move(base);
        res.results.insert(res.results.end(), fit.begin(), fit.end());
        res.results.insert(res.results.end(), mpc.begin(), mpc.end());
        write_file(path("cases.csv"), cases_csv(res.results));

        stage = "plots";
        res.fig_init = cfg.fig_init.value_or(State{0.0, 0.0});
        if (cfg.fig_ref) {
            res.fig_ref = *cfg.fig_ref;
        } else {
            const double r = *std::max_element(cfg.grid.radii.begin(), cfg.grid.radii.end());
            const double a = (cfg.grid.angles.empty() ? 0.0 : cfg.grid.angles.front()) + cfg.grid.angle_offset;
            res.fig_ref = r == 0.0 ? State{0.0, 0.0} : State{r * std::cos(a), r * std::sin(a)};
        }
        const Case fig{0, 0, 0, res.fig_init, res.fig_ref};
        Trajectory tb, tf;
        evaluate_case(plant, res.gain_base, "base", fig, weights, cfg.eval, &tb);
        evaluate_case(plant, res.gain_fit, "fit", fig, weights, cfg.eval, &tf);
        MpcOptions fopt = mopt;
        fopt.shooting.seed = case_seed(cfg.seed, 0, 0);
        Trajectory tm = run_mpc(plant, weights, res.fig_init, res.fig_ref, fopt);
        res.fig_trajectories = {std::move(tb), std::move(tf), std::move(tm)};
        res.fig_labels = {"base", "fit", "mpc"};
        emit_plotdata(res.fig_trajectories, res.fig_labels, path("fig2.csv"), path("fig3.csv"));

        stage = "report";
        write_file(path("report.json"), report_json(res, plant).dump(2) + "\n");
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        Json j;
        j["config"] = config_json(cfg);
        j["failed_stage"] = stage;
        j["error"] = e.what();
        try {
            write_file(path("report.json"), j.dump(2) + "\n");
        } catch (...) {
        }
        throw StageError(stage, e.what());
    }
    return res;
}

} // namespace maglim
