#pragma once

// Simplified averaged inverter model in the dq frame: the RL filter current is
// the state, inverter voltage magnitude and angle deviation are the inputs, and
// the current magnitude is limited by a radial saturation.

#include "maglim/error.hpp"
#include "maglim/gain.hpp"
#include "maglim/linalg.hpp"

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace maglim {

struct PlantParams {
    double R_ohm = 1.3;
    double L_H = 3.5e-3;
    double E_V = 120.0;
    double omega_nom = 2.0 * std::numbers::pi * 60.0;
    double V_nom = 120.0;
    double dt = 10e-6;
    double I_max = 4.167;
    double S_nom = 1500.0; // informational
    double I_nom = 4.167;  // informational

    /// Throws DomainError naming the first offending field.
    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw DomainError("PlantParams." + field + ": " + why);
        };
        const std::pair<const char*, double> all[] = {
            {"R_ohm", R_ohm}, {"L_H", L_H},   {"E_V", E_V},     {"omega_nom_rad_s", omega_nom},
            {"V_nom_V", V_nom}, {"dt_s", dt}, {"I_max_A", I_max}, {"S_nom_VA", S_nom},
            {"I_nom_A", I_nom}};
        for (const auto& [name, value] : all)
            if (!std::isfinite(value)) fail(name, "not finite");
        if (R_ohm < 0.0) fail("R_ohm", "must be >= 0");
        if (L_H <= 0.0) fail("L_H", "must be > 0");
        if (E_V <= 0.0) fail("E_V", "must be > 0");
        if (dt <= 0.0) fail("dt_s", "must be > 0");
        if (I_max <= 0.0) fail("I_max_A", "must be > 0");
        if (dt * R_ohm / L_H >= 1.0) fail("dt_s", "dt*R/L must be < 1");
        if (dt * std::abs(omega_nom) >= 1.0) fail("dt_s", "dt*omega_nom must be < 1");
    }

    /// Continuous-time input matrix diag(sqrt2/L, sqrt2*E/L).
    Mat2 input_matrix_ct() const {
        return Vec2(std::numbers::sqrt2 / L_H, std::numbers::sqrt2 * E_V / L_H).asDiagonal();
    }

    /// Continuous-time RL dynamics in the rotating frame,
    /// d/dt [I_d, I_q] = [[-R/L, w], [-w, -R/L]] [I_d, I_q] + ...
    Mat2 state_matrix_ct() const {
        Mat2 a;
        a << -R_ohm / L_H, omega_nom, -omega_nom, -R_ohm / L_H;
        return a;
    }
};

/// d/q current pair (A).
struct State {
    double i_d = 0.0;
    double i_q = 0.0;

    Vec2 vec() const { return {i_d, i_q}; }
    static State from(const Vec2& v) { return {v[0], v[1]}; }
    friend State operator-(const State& a, const State& b) { return {a.i_d - b.i_d, a.i_q - b.i_q}; }
    friend State operator+(const State& a, const State& b) { return {a.i_d + b.i_d, a.i_q + b.i_q}; }
    friend bool operator==(const State&, const State&) = default;
};

/// Inverter voltage magnitude (V) and angle (rad).
struct Input {
    double v = 0.0;
    double delta = 0.0;

    Vec2 vec() const { return {v, delta}; }
    static Input from(const Vec2& u) { return {u[0], u[1]}; }
    friend bool operator==(const Input&, const Input&) = default;
};

/// x_{t+1} = sat(A x_t + B u_t) with a radial limit of i_max.
struct LinearPlant {
    Mat2 A = Mat2::Identity();
    Mat2 B = Mat2::Identity();
    double i_max = 1.0;
};

/// Radial saturation: scales z onto the disk of radius `limit` if it lies outside.
inline Vec2 saturate(const Vec2& z, double limit) {
    if (!all_finite(z)) throw DomainError("saturate: non-finite input");
    if (!(limit > 0.0)) throw DomainError("saturate: limit must be > 0");
    const double n = z.norm();
    return n <= limit ? z : Vec2(z * (limit / n));
}

/// Forward-Euler discretization A = I + dt*A_ct, B = dt*B_ct.
inline LinearPlant build_plant(const PlantParams& p) {
    p.validate();
    LinearPlant plant;
    plant.A = Mat2::Identity() + p.dt * p.state_matrix_ct();
    plant.B = p.dt * p.input_matrix_ct();
    plant.i_max = p.I_max;
    return plant;
}

/// (3/sqrt2) * V_nom, the factor between d/q current and active/reactive power.
inline double power_scale(const PlantParams& p) { return 3.0 / std::numbers::sqrt2 * p.V_nom; }

inline State power_to_current(double p_ref, double q_ref, const PlantParams& params) {
    if (!(params.V_nom > 0.0)) throw DomainError("power_to_current: V_nom must be > 0");
    if (!std::isfinite(p_ref) || !std::isfinite(q_ref)) throw DomainError("power_to_current: non-finite setpoint");
    const double k = power_scale(params);
    return {p_ref / k, -q_ref / k};
}

/// P = k I_d, Q = -k I_q.
inline std::pair<double, double> current_to_power(const State& x, const PlantParams& params) {
    const double k = power_scale(params);
    return {k * x.i_d, -k * x.i_q};
}

struct StepResult {
    State next;
    bool saturated = false;
    State presat; ///< A x + B u before clipping
};

inline StepResult step(const LinearPlant& plant, const State& x, const Input& u) {
    const Vec2 z = plant.A * x.vec() + plant.B * u.vec();
    const Vec2 next = saturate(z, plant.i_max);
    return {State::from(next), z.norm() > plant.i_max, State::from(z)};
}

/// Feed-forward that makes x_ref a fixed point of the unsaturated loop:
/// u* = B^-1 (I - A) x_ref.
inline Input equilibrium_input(const LinearPlant& plant, const State& x_ref) {
    const Vec2 rhs = (Mat2::Identity() - plant.A) * x_ref.vec();
    return Input::from(plant.B.partialPivLu().solve(rhs));
}

struct TrajectoryRecord {
    std::size_t t = 0;
    State state;
    Input input;            ///< absolute input applied at this state
    bool saturated = false; ///< this state was produced by clipping
    double lyapunov = 0.0;  ///< |state - x_ref|^2
    std::optional<State> presat; ///< pre-clip value of `state` (audit runs only)
};

struct Trajectory {
    std::vector<TrajectoryRecord> records;
    State x_ref;
    Input u_ref;
    bool converged = false;      ///< terminated by the stop rule
    std::size_t settle_step = 0; ///< first step of the final quiet window

    bool empty() const { return records.empty(); }
    std::size_t size() const { return records.size(); }
    const TrajectoryRecord& back() const { return records.back(); }
};

struct StopRule {
    double tol = 1e-5;
    std::size_t window = 10;
    std::size_t max_steps = 200000;
};

struct SimulateOptions {
    StopRule stop;
    bool record_presat = false;
};

/// Tracks |x_t - x_{t-1}| < tol for `window` consecutive steps.
class StopMonitor {
public:
    explicit StopMonitor(const StopRule& rule) : rule_(rule) {}

    /// Feed the step that produced state index t; returns true once the rule fires.
    bool update(const Vec2& prev, const Vec2& next, std::size_t t) {
        if ((next - prev).norm() < rule_.tol) {
            if (quiet_ == 0) quiet_start_ = t - 1;
            ++quiet_;
        } else {
            quiet_ = 0;
        }
        return quiet_ >= rule_.window;
    }
    std::size_t quiet_start() const { return quiet_start_; }

private:
    StopRule rule_;
    std::size_t quiet_ = 0;
    std::size_t quiet_start_ = 0;
};

/// Closed loop u_t = u_ref - K (x_t - x_ref) through the saturated plant.
inline Trajectory simulate(const LinearPlant& plant, const Gain& gain, const State& x0, const State& x_ref,
                           const Input& u_ref, const SimulateOptions& opt = {}) {
    if (opt.stop.max_steps < 1) throw PreconditionError("simulate: max_steps must be >= 1");
    if (!(opt.stop.tol > 0.0)) throw PreconditionError("simulate: stop tolerance must be > 0");

    Trajectory traj;
    traj.x_ref = x_ref;
    traj.u_ref = u_ref;
    traj.records.reserve(std::min<std::size_t>(opt.stop.max_steps + 1, 4096));

    const Vec2 xr = x_ref.vec();
    const Vec2 ur = u_ref.vec();
    auto input_at = [&](const Vec2& x) { return Vec2(ur - gain.K * (x - xr)); };

    Vec2 x = x0.vec();
    TrajectoryRecord first{0, x0, Input::from(input_at(x)), false, (x - xr).squaredNorm(), std::nullopt};
    if (opt.record_presat) first.presat = x0;
    traj.records.push_back(first);

    StopMonitor monitor(opt.stop);
    for (std::size_t t = 1; t <= opt.stop.max_steps; ++t) {
        const Vec2 u = input_at(x);
        const Vec2 z = plant.A * x + plant.B * u;
        const Vec2 next = saturate(z, plant.i_max);

        TrajectoryRecord rec;
        rec.t = t;
        rec.state = State::from(next);
        rec.input = Input::from(input_at(next));
        rec.saturated = z.norm() > plant.i_max;
        rec.lyapunov = (next - xr).squaredNorm();
        if (opt.record_presat) rec.presat = State::from(z);
        traj.records.push_back(rec);

        const bool done = monitor.update(x, next, t);
        x = next;
        if (done) {
            traj.converged = true;
            traj.settle_step = monitor.quiet_start();
            break;
        }
    }
    if (!traj.converged) traj.settle_step = traj.records.back().t;
    return traj;
}

/// Sum over records of (x - x_ref)' Q (x - x_ref) + (u - u_ref)' R (u - u_ref).
inline double trajectory_cost(const Trajectory& traj, const Mat2& Q, const Mat2& R) {
    const Vec2 xr = traj.x_ref.vec();
    const Vec2 ur = traj.u_ref.vec();
    double cost = 0.0;
    for (const auto& rec : traj.records) {
        const Vec2 dx = rec.state.vec() - xr;
        const Vec2 du = rec.input.vec() - ur;
        cost += dx.dot(Q * dx) + du.dot(R * du);
    }
    return cost;
}

} // namespace maglim
