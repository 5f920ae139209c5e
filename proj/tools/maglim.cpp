// Command-line front end: certify, lqr, fit, dataset, mpc, fullorder, experiment.

#include "maglim/maglim.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

using namespace maglim;

namespace {

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-")
        std::cout << text;
    else
        write_file(out, text);
}

Mat2 parse_mat4(const std::string& text, const std::string& what) {
    const auto v = parse_list(text, what);
    if (v.size() != 4) throw ParseError(what + ": expected four comma-separated numbers");
    Mat2 m;
    m << v[0], v[1], v[2], v[3];
    return m;
}

/// Weights file: q = <2 or 4 numbers>, rcost = <kB | 4 numbers>, optionally
/// under a [weights] header.
LqrWeights load_weights(const std::string& path, const LinearPlant& plant) {
    const auto f = KeyValueFile::load(path);
    f.reject_unknown_sections({"", "weights"});
    const std::string sec = f.has_section("weights") ? "weights" : "";
    LqrWeights w = reference_weights(plant);
    if (auto q = f.get_string(sec, "q")) w.Q = parse_q(*q, f.context(sec, "q"));
    if (auto r = f.get_string(sec, "rcost")) {
        auto [mult, mat] = parse_rcost(*r, f.context(sec, "rcost"));
        w.R = mat ? *mat : Mat2(*mult * plant.B);
    }
    f.reject_unused(sec);
    w.validate();
    return w;
}

/// Optional full-order overrides: any FullOrderParams field by name, plus
/// current_bandwidth / voltage_ratio to re-run the loop shaping.
FullOrderParams load_fullorder_params(const std::string& path, const PlantParams& simple) {
    FullOrderParams p = fullorder_params_matching(simple);
    if (path.empty()) return p;
    const auto f = KeyValueFile::load(path);
    f.reject_unknown_sections({""});
    p.R_i = f.get_double("", "R_i", p.R_i);
    p.L_i = f.get_double("", "L_i", p.L_i);
    p.R_g = f.get_double("", "R_g", p.R_g);
    p.L_g = f.get_double("", "L_g", p.L_g);
    p.C = f.get_double("", "C", p.C);
    LoopShaping ls;
    ls.current_bandwidth = f.get_double("", "current_bandwidth", ls.current_bandwidth);
    ls.voltage_ratio = f.get_double("", "voltage_ratio", ls.voltage_ratio);
    apply_loop_shaping(p, ls);
    p.k_p_pll = f.get_double("", "k_p_pll", p.k_p_pll);
    p.k_i_pll = f.get_double("", "k_i_pll", p.k_i_pll);
    p.k_pv = f.get_double("", "k_pv", p.k_pv);
    p.k_iv = f.get_double("", "k_iv", p.k_iv);
    p.k_pi = f.get_double("", "k_pi", p.k_pi);
    p.k_ii = f.get_double("", "k_ii", p.k_ii);
    f.reject_unused("");
    p.validate();
    return p;
}

Json report_to_json(const CertificateReport& r) {
    Json j;
    j["feasible"] = r.feasible;
    j["sigma_closed"] = r.sigma_closed;
    j["eig_lo"] = r.eig_lo;
    j["eig_hi"] = r.eig_hi;
    return j;
}

Json comparison_json(const ModelComparison& c) {
    Json j;
    j["ss_simplified"] = {c.ss_simplified[0], c.ss_simplified[1]};
    j["ss_full"] = {c.ss_full[0], c.ss_full[1]};
    j["steady_state_offset"] = c.steady_state_offset;
    j["steady_state_offset_rel"] = c.steady_state_offset_rel;
    j["settle_simplified_s"] = c.settle_simplified;
    j["settle_full_s"] = c.settle_full;
    j["max_mag_simplified"] = c.max_mag_simplified;
    j["max_mag_full"] = c.max_mag_full;
    j["overshoot_simplified"] = c.overshoot_simplified;
    j["overshoot_full"] = c.overshoot_full;
    j["max_discrepancy"] = c.max_discrepancy;
    return j;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Magnitude-limited inverter current control: certificates, LQR, MPC fitting, full-order checks"};
    app.require_subcommand(1);

    // certify
    std::string params_path, gain_path;
    double eps = kDefaultCertEpsilon;
    auto* certify = app.add_subcommand("certify", "Check the circular-Lyapunov certificate of a gain");
    certify->add_option("--params", params_path, "Plant parameter file")->required();
    certify->add_option("--gain", gain_path, "Gain JSON file")->required();
    certify->add_option("--epsilon", eps, "Feasibility margin on sigma^2");

    // lqr
    std::string q_text, r_text = "5B", method = "discrete", out_path;
    auto* lqr = app.add_subcommand("lqr", "LQR gain for the plant");
    lqr->add_option("--params", params_path, "Plant parameter file")->required();
    lqr->add_option("--q", q_text, "Q as four numbers (row-major)")->required();
    lqr->add_option("--rcost", r_text, "R as '5B' (multiple of B) or four numbers");
    lqr->add_option("--method", method, "discrete (Riccati on the sampled plant) or baseline (continuous recipe)")
        ->check(CLI::IsMember({"discrete", "baseline"}));
    lqr->add_option("--out", out_path, "Output file (default stdout)");

    // fit
    std::string dataset_path;
    double margin = 1e-6;
    auto* fit = app.add_subcommand("fit", "Fit a certified gain to a dataset");
    fit->add_option("--params", params_path, "Plant parameter file")->required();
    fit->add_option("--dataset", dataset_path, "Dataset CSV")->required();
    fit->add_option("--margin", margin, "Certificate margin in (0, 1)");
    fit->add_option("--out", out_path, "Output file (default stdout)");

    // dataset
    std::string weights_path;
    std::size_t horizon = 5;
    std::uint64_t seed = 0;
    std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    auto* dataset = app.add_subcommand("dataset", "Generate the MPC dataset over the polar grid");
    dataset->add_option("--params", params_path, "Plant parameter file")->required();
    dataset->add_option("--weights", weights_path, "Weights file (q, rcost)")->required();
    dataset->add_option("--horizon", horizon, "MPC horizon in steps");
    dataset->add_option("--out", out_path, "Output CSV")->required();
    dataset->add_option("--seed", seed, "Base seed");
    dataset->add_option("--jobs", jobs, "Worker threads");

    // mpc
    std::string x0_text, xref_text;
    auto* mpc = app.add_subcommand("mpc", "Closed-loop rolling-horizon MPC run");
    mpc->add_option("--params", params_path, "Plant parameter file")->required();
    mpc->add_option("--x0", x0_text, "Initial state d,q")->required();
    mpc->add_option("--xref", xref_text, "Reference d,q")->required();
    mpc->add_option("--weights", weights_path, "Weights file (default Q = diag(1, 0.1), R = 5B)");
    mpc->add_option("--horizon", horizon, "Horizon in steps");
    mpc->add_option("--seed", seed, "Seed for random starts");
    mpc->add_option("--out", out_path, "Trajectory CSV (default stdout)");

    // fullorder
    std::string step_text, fo_path;
    double t_end = 0.05, dt_int = 1e-6;
    bool compare = false;
    auto* fullorder = app.add_subcommand("fullorder", "Full-order model step response");
    fullorder->add_option("--params", params_path, "Simplified plant parameter file")->required();
    fullorder->add_option("--gain", gain_path, "Gain JSON file")->required();
    fullorder->add_option("--step", step_text, "Power step target P,Q from (0, 0)")->required();
    fullorder->add_option("--t-end", t_end, "Simulated time (s)")->required();
    fullorder->add_option("--dt-int", dt_int, "RK4 step (s)");
    fullorder->add_option("--fullorder-params", fo_path, "Optional full-order overrides (key = value)");
    fullorder->add_flag("--compare", compare, "Also run the simplified model and print a JSON comparison");
    fullorder->add_option("--out", out_path, "Output CSV (default stdout; required with --compare)");

    // experiment
    std::string config_path, out_dir;
    bool seed_given = false;
    auto* experiment = app.add_subcommand("experiment", "Run the full grid experiment");
    experiment->add_option("--config", config_path, "Experiment config (key = value sections)")->required();
    experiment->add_option("--out", out_dir, "Output directory")->required();
    auto* seed_opt = experiment->add_option("--seed", seed, "Base seed (overrides config)");
    experiment->add_option("--jobs", jobs, "Worker threads");

    CLI11_PARSE(app, argc, argv);
    seed_given = seed_opt->count() > 0;

    try {
        if (*certify) {
            const auto plant = build_plant(load_plant_params(params_path));
            const auto rep = certify_gain(plant, load_gain(gain_path).K, eps);
            std::cout << report_to_json(rep).dump(2) << "\n";
            return rep.feasible ? 0 : 1;
        }
        if (*lqr) {
            const auto params = load_plant_params(params_path);
            const auto plant = build_plant(params);
            LqrWeights w;
            w.Q = parse_mat4(q_text, "--q");
            auto [mult, mat] = parse_rcost(r_text, "--rcost");
            Gain g;
            if (method == "discrete") {
                w.R = mat ? *mat : Mat2(*mult * plant.B);
                g = lqr_gain(plant, w);
            } else {
                if (mat) throw ParseError("--method baseline takes --rcost as a multiple of B");
                BaselineRecipe recipe;
                recipe.q_diag = w.Q.diagonal();
                recipe.r_multiplier = *mult;
                if (!w.Q.isDiagonal()) throw ParseError("--method baseline requires a diagonal Q");
                g = baseline_gain(params, recipe);
            }
            emit(gain_to_json(g, plant).dump(2) + "\n", out_path);
            return 0;
        }
        if (*fit) {
            const auto plant = build_plant(load_plant_params(params_path));
            FitOptions opt;
            opt.margin = margin;
            const auto res = fit_gain_detailed(plant, load_dataset(dataset_path), opt);
            emit(gain_to_json(res.gain, plant).dump(2) + "\n", out_path);
            return 0;
        }
        if (*dataset) {
            const auto params = load_plant_params(params_path);
            const auto plant = build_plant(params);
            const auto w = load_weights(weights_path, plant);
            const auto grid = build_grid(reference_grid(params.I_max));
            MpcOptions opt;
            opt.horizon = horizon;
            opt.shooting.seed = seed;
            const auto run = generate_dataset_detailed(plant, w, grid, grid, opt, jobs);
            write_file(out_path, dataset_to_csv(run.dataset));
            for (const auto& f : run.failures)
                std::cerr << "case (" << f.init_index << ", " << f.ref_index << ") failed: " << f.message << "\n";
            std::cerr << run.dataset.size() << " samples from " << grid.size() * grid.size() << " cases\n";
            return run.failures.empty() ? 0 : 1;
        }
        if (*mpc) {
            const auto plant = build_plant(load_plant_params(params_path));
            const auto w = weights_path.empty() ? reference_weights(plant) : load_weights(weights_path, plant);
            MpcOptions opt;
            opt.horizon = horizon;
            opt.shooting.seed = seed;
            const auto traj = run_mpc(plant, w, State::from(parse_pair(x0_text, "--x0")),
                                      State::from(parse_pair(xref_text, "--xref")), opt);
            emit(trajectory_to_csv(traj), out_path);
            return 0;
        }
        if (*fullorder) {
            const auto simple = load_plant_params(params_path);
            const auto full = load_fullorder_params(fo_path, simple);
            const Gain g = load_gain(gain_path);
            const Vec2 pq = parse_pair(step_text, "--step");
            if (compare && (out_path.empty() || out_path == "-"))
                throw ParseError("--compare prints JSON to stdout; give the CSV an --out file");

            const auto x0 = fullorder_equilibrium(0.0, 0.0, full);
            const auto ref = reference_from_power(pq[0], pq[1], full);
            const auto traj = integrate_fullorder(x0, full, g.K, ref, t_end, dt_int, simple.dt);
            std::string csv = "t,i_gd,i_gq,i_id,i_iq,w_d,w_q,delta_pll,mag_ig\n";
            for (const auto& s : traj.samples) {
                const auto& x = s.state;
                csv += fmt_double(s.t) + "," + fmt_double(x.i_gd) + "," + fmt_double(x.i_gq) + "," +
                       fmt_double(x.i_id) + "," + fmt_double(x.i_iq) + "," + fmt_double(x.w_d) + "," +
                       fmt_double(x.w_q) + "," + fmt_double(x.delta_pll) + "," +
                       fmt_double(x.grid_current().norm()) + "\n";
            }
            emit(csv, out_path);
            if (compare) {
                CompareOptions co;
                co.t_end = t_end;
                co.dt_int = dt_int;
                const auto cmp = compare_models(full, simple, g.K, PowerStep{0.0, 0.0, pq[0], pq[1]}, co);
                auto j = comparison_json(cmp);
                j["rk4_halving_difference"] = rk4_halving_difference(x0, full, g.K, ref, t_end, dt_int);
                std::cout << j.dump(2) << "\n";
            }
            return 0;
        }
        if (*experiment) {
            auto cfg = load_experiment_config(config_path);
            if (seed_given) cfg.seed = seed;
            const auto res = run_full_experiment(cfg, out_dir, jobs);
            for (const auto& s : res.summaries)
                std::cerr << s.controller << ": average cost " << s.all.average_cost << ", stuck "
                          << s.all.stuck_count << "/" << s.all.n_cases << "\n";
            std::cerr << "fitted gain " << (res.fit_certified ? "certified" : "NOT certified") << "\n";
            return res.fit_certified ? 0 : 1;
        }
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
