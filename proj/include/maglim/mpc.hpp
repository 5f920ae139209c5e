#pragma once

// Finite-horizon optimal control through the saturated dynamics, solved by
// direct shooting, and the rolling-horizon loop built on top of it.
//
// Decision variables are input deviations u_0..u_{T-1} from the equilibrium
// input. With e_i = x_i - x_ref the dynamics read
//     z_{i+1} = x_ref + A e_i + B u_i,   x_{i+1} = sat(z_{i+1}),
// and the objective is sum_{i<T} e_{i+1}' Q e_{i+1} + u_i' R u_i.
// Gradients are accumulated backwards through the saturation Jacobian; the
// optimizer is BFGS with Armijo backtracking, preconditioned by the exact
// Hessian of the unsaturated problem.

#include "maglim/error.hpp"
#include "maglim/fit.hpp"
#include "maglim/linalg.hpp"
#include "maglim/lqr.hpp"
#include "maglim/plant.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace maglim {

struct OcpSpec {
    LinearPlant plant;
    std::size_t horizon = 5;
    LqrWeights weights;
    State x_init;
    State x_ref;
};

struct OcpDiagnostics {
    std::size_t iterations = 0; ///< summed over all starts
    std::size_t restarts = 0;   ///< number of starts tried
    bool converged = false;     ///< best start reached the gradient tolerance
    double gradient_norm = 0.0; ///< of the returned solution
    std::size_t best_start = 0;
};

struct OcpSolution {
    std::vector<Input> inputs; ///< deviations from the equilibrium input, length T
    std::vector<State> states; ///< x_0..x_T, length T+1
    double objective = 0.0;
    OcpDiagnostics diag;
};

/// Jacobian of sat(.) at z. On the circle itself the outside branch is used.
inline Mat2 saturation_jacobian(const Vec2& z, double limit) {
    const double n = z.norm();
    if (n < limit) return Mat2::Identity();
    const Vec2 zh = z / n;
    return (limit / n) * (Mat2::Identity() - zh * zh.transpose());
}

struct ShootingOptions {
    double grad_tol = 1e-8;
    std::size_t max_iter = 500;
    std::size_t random_starts = 3;
    std::uint64_t seed = 0;
};

/// Evaluates and differentiates the shooting objective for one OcpSpec.
class ShootingProblem {
public:
    explicit ShootingProblem(const OcpSpec& spec) : spec_(spec), n_(2 * spec.horizon) {
        if (spec.horizon < 1) throw DomainError("OcpSpec: horizon must be >= 1");
        spec.weights.validate();
        build_unsaturated_hessian();
    }

    std::size_t dim() const { return n_; }
    const OcpSpec& spec() const { return spec_; }

    /// Objective; fills the trajectory when `states` is non-null.
    double value(const Eigen::VectorXd& u, std::vector<Vec2>* states = nullptr) const {
        const auto& p = spec_.plant;
        const Vec2 xr = spec_.x_ref.vec();
        Vec2 x = spec_.x_init.vec();
        if (states) {
            states->clear();
            states->push_back(x);
        }
        double j = 0.0;
        for (std::size_t i = 0; i < spec_.horizon; ++i) {
            const Vec2 ui = u.segment<2>(2 * i);
            const Vec2 z = xr + p.A * (x - xr) + p.B * ui;
            x = saturate(z, p.i_max);
            const Vec2 e = x - xr;
            j += e.dot(spec_.weights.Q * e) + ui.dot(spec_.weights.R * ui);
            if (states) states->push_back(x);
        }
        return j;
    }

    /// Objective and its gradient by reverse accumulation.
    double value_and_gradient(const Eigen::VectorXd& u, Eigen::VectorXd& g) const {
        const auto& p = spec_.plant;
        const auto& Q = spec_.weights.Q;
        const auto& R = spec_.weights.R;
        const Vec2 xr = spec_.x_ref.vec();
        const std::size_t T = spec_.horizon;

        zs_.resize(T);
        es_.resize(T + 1);
        es_[0] = spec_.x_init.vec() - xr;
        double j = 0.0;
        for (std::size_t i = 0; i < T; ++i) {
            const Vec2 ui = u.segment<2>(2 * i);
            zs_[i] = xr + p.A * es_[i] + p.B * ui;
            es_[i + 1] = saturate(zs_[i], p.i_max) - xr;
            j += es_[i + 1].dot(Q * es_[i + 1]) + ui.dot(R * ui);
        }

        g.resize(static_cast<Eigen::Index>(n_));
        Vec2 lambda = 2.0 * Q * es_[T]; // dJ/dx_T
        for (std::size_t k = T; k-- > 0;) {
            const Vec2 dz = saturation_jacobian(zs_[k], p.i_max).transpose() * lambda;
            g.segment<2>(2 * k) = p.B.transpose() * dz + 2.0 * R * u.segment<2>(2 * k);
            if (k > 0) lambda = 2.0 * Q * es_[k] + p.A.transpose() * dz;
        }
        return j;
    }

    /// Inverse of the exact Hessian when no stage saturates.
    const Eigen::MatrixXd& inverse_hessian() const { return h_inv_; }

    /// Open-loop inputs of the time-varying finite-horizon LQR policy, rolled
    /// out through the saturated dynamics.
    Eigen::VectorXd lqr_rollout() const {
        const auto& p = spec_.plant;
        const Vec2 xr = spec_.x_ref.vec();
        Eigen::VectorXd u(static_cast<Eigen::Index>(n_));
        Vec2 x = spec_.x_init.vec();
        for (std::size_t i = 0; i < spec_.horizon; ++i) {
            const Vec2 ui = -policy_[i] * (x - xr);
            u.segment<2>(2 * i) = ui;
            x = saturate(xr + p.A * (x - xr) + p.B * ui, p.i_max);
        }
        return u;
    }

private:
    void build_unsaturated_hessian() {
        const auto& p = spec_.plant;
        const auto& Q = spec_.weights.Q;
        const auto& R = spec_.weights.R;
        const std::size_t T = spec_.horizon;
        const auto n = static_cast<Eigen::Index>(n_);

        // e_{i+1} = A^{i+1} e_0 + sum_{k<=i} A^{i-k} B u_k  => J = |G u + h|_Qbar^2 + |u|_Rbar^2.
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
        std::vector<Mat2> a_pow(T);
        a_pow[0] = Mat2::Identity();
        for (std::size_t i = 1; i < T; ++i) a_pow[i] = p.A * a_pow[i - 1];
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t k = 0; k <= i; ++k)
                G.block<2, 2>(2 * static_cast<Eigen::Index>(i), 2 * static_cast<Eigen::Index>(k)) = a_pow[i - k] * p.B;
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
        Eigen::MatrixXd qbar = Eigen::MatrixXd::Zero(n, n);
        for (std::size_t i = 0; i < T; ++i) {
            const auto o = 2 * static_cast<Eigen::Index>(i);
            qbar.block<2, 2>(o, o) = Q;
            H.block<2, 2>(o, o) = R;
        }
        H = 2.0 * (G.transpose() * qbar * G + H);
        h_inv_ = H.ldlt().solve(Eigen::MatrixXd::Identity(n, n));

        // Backward pass for the time-varying policy (terminal weight Q).
        policy_.assign(T, Mat2::Zero());
        Mat2 P = Mat2::Zero();
        for (std::size_t i = T; i-- > 0;) {
            const Mat2 pt = Q + P;
            const Mat2 L = (R + p.B.transpose() * pt * p.B).ldlt().solve(p.B.transpose() * pt * p.A);
            policy_[i] = L;
            P = p.A.transpose() * pt * (p.A - p.B * L);
            P = 0.5 * (P + P.transpose());
        }
    }

    OcpSpec spec_;
    std::size_t n_;
    Eigen::MatrixXd h_inv_;
    std::vector<Mat2> policy_;
    mutable std::vector<Vec2> zs_;
    mutable std::vector<Vec2> es_;
};

struct LocalSolve {
    Eigen::VectorXd u;
    double objective = std::numeric_limits<double>::infinity();
    double gradient_norm = std::numeric_limits<double>::infinity();
    std::size_t iterations = 0;
    bool converged = false;
    bool line_search_failed = false;
    std::vector<double> history; ///< objective after each accepted step
};

/// BFGS with Armijo backtracking from `u0`. Accepted steps never increase the
/// objective.
inline LocalSolve bfgs_minimize(const ShootingProblem& prob, Eigen::VectorXd u0, const ShootingOptions& opt,
                                bool keep_history = false) {
    LocalSolve out;
    const auto n = static_cast<Eigen::Index>(prob.dim());
    Eigen::VectorXd g(n), g_new(n);
    double f = prob.value_and_gradient(u0, g);
    Eigen::MatrixXd H = prob.inverse_hessian();
    Eigen::VectorXd u = std::move(u0);
    if (keep_history) out.history.push_back(f);

    for (std::size_t it = 0; it < opt.max_iter; ++it) {
        if (g.norm() < opt.grad_tol) {
            out.converged = true;
            break;
        }
        Eigen::VectorXd d = -H * g;
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            H = prob.inverse_hessian();
            d = -H * g;
            slope = g.dot(d);
        }
        double alpha = 1.0;
        bool accepted = false;
        Eigen::VectorXd u_new;
        double f_new = f;
        for (int ls = 0; ls < 60; ++ls) {
            u_new = u + alpha * d;
            f_new = prob.value_and_gradient(u_new, g_new);
            if (f_new <= f + 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        ++out.iterations;
        if (!accepted) {
            out.line_search_failed = true;
            break;
        }
        const Eigen::VectorXd s = u_new - u;
        const Eigen::VectorXd y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-300 * s.norm() * y.norm() && sy > 0.0) {
            const double rho = 1.0 / sy;
            const Eigen::VectorXd hy = H * y;
            H += (rho * rho * y.dot(hy) + rho) * (s * s.transpose()) - rho * (hy * s.transpose() + s * hy.transpose());
        }
        u = std::move(u_new);
        g = g_new;
        const bool stalled = f - f_new <= 0.0;
        f = f_new;
        if (keep_history) out.history.push_back(f);
        if (stalled && g.norm() >= opt.grad_tol) {
            out.line_search_failed = true;
            break;
        }
    }
    out.converged = out.converged || g.norm() < opt.grad_tol;
    out.u = std::move(u);
    out.objective = f;
    out.gradient_norm = g.norm();
    return out;
}

inline OcpSolution make_solution(const ShootingProblem& prob, const LocalSolve& best) {
    OcpSolution sol;
    std::vector<Vec2> xs;
    sol.objective = prob.value(best.u, &xs);
    for (const auto& x : xs) sol.states.push_back(State::from(x));
    for (std::size_t i = 0; i < prob.spec().horizon; ++i)
        sol.inputs.push_back(Input::from(best.u.segment<2>(2 * static_cast<Eigen::Index>(i))));
    sol.diag.converged = best.converged;
    sol.diag.gradient_norm = best.gradient_norm;
    return sol;
}

/// Multi-start local solve: zero sequence, LQR rollout, `warm_start` when
/// given, and `random_starts` perturbations of the LQR rollout.
inline OcpSolution solve_ocp(const OcpSpec& spec, const ShootingOptions& opt = {},
                             const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
    const ShootingProblem prob(spec);
    const auto n = static_cast<Eigen::Index>(prob.dim());

    std::vector<Eigen::VectorXd> starts;
    starts.push_back(Eigen::VectorXd::Zero(n));
    const Eigen::VectorXd lqr = prob.lqr_rollout();
    starts.push_back(lqr);
    if (warm_start && warm_start->size() == n) starts.push_back(*warm_start);

    // Perturbation scale per channel: the input that moves the state by i_max
    // over the horizon, plus the size of the LQR inputs.
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto& B = spec.plant.B;
    for (std::size_t r = 0; r < opt.random_starts; ++r) {
        Eigen::VectorXd s = lqr;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto c = i % 2;
            const double scale = 0.5 * std::abs(lqr[i]) +
                                 0.25 * spec.plant.i_max / (std::abs(B(c, c)) * static_cast<double>(spec.horizon));
            s[i] += scale * normal(rng);
        }
        starts.push_back(std::move(s));
    }

    LocalSolve best;
    std::size_t best_idx = 0;
    std::size_t total_iter = 0;
    bool any_usable = false;
    for (std::size_t k = 0; k < starts.size(); ++k) {
        LocalSolve ls = bfgs_minimize(prob, starts[k], opt);
        total_iter += ls.iterations;
        if (!std::isfinite(ls.objective)) continue;
        if (ls.converged || !ls.line_search_failed || ls.iterations > 0) any_usable = true;
        const bool better = ls.objective < best.objective ||
                            (ls.objective == best.objective && ls.converged && !best.converged);
        if (better) {
            best = std::move(ls);
            best_idx = k;
        }
    }
    if (!any_usable || !std::isfinite(best.objective))
        throw SolverError("solve_ocp: every start failed the line search");

    OcpSolution sol = make_solution(prob, best);
    sol.diag.iterations = total_iter;
    sol.diag.restarts = starts.size();
    sol.diag.best_start = best_idx;
    return sol;
}

// ---------------------------------------------------------------------------
// Rolling horizon
// ---------------------------------------------------------------------------

struct MpcOptions {
    std::size_t horizon = 5;
    StopRule stop;
    ShootingOptions shooting;
};

struct MpcRun {
    Trajectory trajectory;
    std::size_t unconverged_solves = 0;
};

/// Applies the first input of each solve, warm-starting the next solve with
/// the shifted sequence (zero tail). Every record carries the input the
/// controller computed at that state.
inline MpcRun run_mpc_detailed(const LinearPlant& plant, const LqrWeights& weights, const State& x_init,
                               const State& x_ref, const MpcOptions& opt = {}) {
    if (opt.horizon < 1) throw PreconditionError("run_mpc: horizon must be >= 1");
    MpcRun run;
    auto& traj = run.trajectory;
    traj.x_ref = x_ref;
    traj.u_ref = equilibrium_input(plant, x_ref);
    const Vec2 ur = traj.u_ref.vec();
    const Vec2 xr = x_ref.vec();

    std::optional<Eigen::VectorXd> warm;
    std::uint64_t step_seed = opt.shooting.seed;
    auto control = [&](const State& x, std::size_t t) -> Vec2 {
        OcpSpec spec{plant, opt.horizon, weights, x, x_ref};
        ShootingOptions so = opt.shooting;
        so.seed = step_seed + 0x9E3779B97F4A7C15ULL * (t + 1);
        OcpSolution sol;
        try {
            sol = solve_ocp(spec, so, warm);
        } catch (const SolverError& e) {
            throw SolverError(std::string(e.what()) + " (mpc step " + std::to_string(t) + ")");
        }
        if (!sol.diag.converged) ++run.unconverged_solves;
        const auto n = static_cast<Eigen::Index>(2 * opt.horizon);
        Eigen::VectorXd shifted = Eigen::VectorXd::Zero(n);
        for (std::size_t i = 1; i < opt.horizon; ++i)
            shifted.segment<2>(2 * static_cast<Eigen::Index>(i - 1)) = sol.inputs[i].vec();
        warm = shifted;
        return ur + sol.inputs.front().vec();
    };

    Vec2 x = x_init.vec();
    Vec2 u = control(x_init, 0);
    traj.records.push_back({0, x_init, Input::from(u), false, (x - xr).squaredNorm(), std::nullopt});

    StopMonitor monitor(opt.stop);
    for (std::size_t t = 1; t <= opt.stop.max_steps; ++t) {
        const Vec2 z = plant.A * x + plant.B * u;
        const Vec2 next = saturate(z, plant.i_max);
        const bool done = monitor.update(x, next, t);
        x = next;
        u = control(State::from(x), t);
        traj.records.push_back(
            {t, State::from(x), Input::from(u), z.norm() > plant.i_max, (x - xr).squaredNorm(), std::nullopt});
        if (done) {
            traj.converged = true;
            traj.settle_step = monitor.quiet_start();
            break;
        }
    }
    if (!traj.converged) traj.settle_step = traj.records.back().t;
    return run;
}

inline Trajectory run_mpc(const LinearPlant& plant, const LqrWeights& weights, const State& x_init,
                          const State& x_ref, const MpcOptions& opt = {}) {
    return run_mpc_detailed(plant, weights, x_init, x_ref, opt).trajectory;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Deterministic per-case seed.
inline std::uint64_t case_seed(std::uint64_t base, std::size_t i, std::size_t j) {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct CaseFailure {
    std::size_t init_index = 0;
    std::size_t ref_index = 0;
    std::string message;
};

struct DatasetRun {
    Dataset dataset;
    std::vector<Trajectory> trajectories; ///< grid order; empty on failure
    std::vector<CaseFailure> failures;
};

/// Runs `fn(k)` for k in [0, n) on `jobs` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t k = 0; k < n; ++k) fn(k);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (std::size_t k = next++; k < n; k = next++) fn(k);
        });
    for (auto& th : pool) th.join();
}

/// Appends the samples of one closed-loop trajectory. The last record is
/// dropped: its input never acted on the plant.
inline void append_samples(Dataset& d, const Trajectory& traj, std::size_t traj_id) {
    const Vec2 xr = traj.x_ref.vec();
    const Vec2 ur = traj.u_ref.vec();
    for (std::size_t k = 0; k + 1 < traj.records.size(); ++k) {
        const auto& rec = traj.records[k];
        d.samples.push_back({traj_id, rec.t, rec.state.vec() - xr, rec.input.vec() - ur});
    }
}

inline DatasetRun generate_dataset_detailed(const LinearPlant& plant, const LqrWeights& weights,
                                            const std::vector<State>& init_grid, const std::vector<State>& ref_grid,
                                            const MpcOptions& opt = {}, std::size_t jobs = 1) {
    if (init_grid.empty() || ref_grid.empty()) throw PreconditionError("generate_dataset: empty grid");
    const std::size_t n_cases = init_grid.size() * ref_grid.size();
    DatasetRun out;
    out.trajectories.resize(n_cases);
    std::vector<std::optional<std::string>> errors(n_cases);

    parallel_for(n_cases, jobs, [&](std::size_t k) {
        const std::size_t i = k / ref_grid.size();
        const std::size_t j = k % ref_grid.size();
        MpcOptions o = opt;
        o.shooting.seed = case_seed(opt.shooting.seed, i, j);
        try {
            out.trajectories[k] = run_mpc(plant, weights, init_grid[i], ref_grid[j], o);
        } catch (const SolverError& e) {
            errors[k] = e.what();
        }
    });

    for (std::size_t k = 0; k < n_cases; ++k) {
        const std::size_t i = k / ref_grid.size();
        const std::size_t j = k % ref_grid.size();
        out.dataset.provenance.emplace_back(i, j);
        if (errors[k]) {
            out.failures.push_back({i, j, *errors[k]});
            continue;
        }
        append_samples(out.dataset, out.trajectories[k], k);
    }
    return out;
}

inline Dataset generate_dataset(const LinearPlant& plant, const LqrWeights& weights, const std::vector<State>& init_grid,
                                const std::vector<State>& ref_grid, std::size_t horizon) {
    MpcOptions opt;
    opt.horizon = horizon;
    return generate_dataset_detailed(plant, weights, init_grid, ref_grid, opt).dataset;
}

} // namespace maglim
