#pragma once

// Twelve-state averaged model of a grid-connected inverter with an LCL filter:
// synchronous-frame PLL, capacitor-voltage PI loop, inverter-current PI loop
// with a radial limit on the current reference, and the outer static gain on
// the grid-side current. Integrated with fixed-step classic RK4.

#include "maglim/error.hpp"
#include "maglim/gain.hpp"
#include "maglim/linalg.hpp"
#include "maglim/plant.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

namespace maglim {

/// Ordering is the serialization contract.
struct FullOrderState {
    double delta_pll = 0.0; ///< PLL frame angle minus grid angle (rad)
    double pi_pll = 0.0;    ///< PLL integrator
    double phi_d = 0.0;     ///< voltage-loop integrators
    double phi_q = 0.0;
    double gamma_d = 0.0; ///< current-loop integrators
    double gamma_q = 0.0;
    double i_id = 0.0; ///< inverter-side inductor current (A)
    double i_iq = 0.0;
    double w_d = 0.0; ///< capacitor voltage (V)
    double w_q = 0.0;
    double i_gd = 0.0; ///< grid-side inductor current (A)
    double i_gq = 0.0;

    static constexpr std::size_t size = 12;
    using Array = std::array<double, size>;

    Array to_array() const {
        return {delta_pll, pi_pll, phi_d, phi_q, gamma_d, gamma_q, i_id, i_iq, w_d, w_q, i_gd, i_gq};
    }
    static FullOrderState from_array(const Array& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9], a[10], a[11]};
    }
    bool finite() const {
        for (double v : to_array())
            if (!std::isfinite(v)) return false;
        return true;
    }
    Vec2 grid_current() const { return {i_gd, i_gq}; }
    Vec2 inverter_current() const { return {i_id, i_iq}; }
    Vec2 capacitor_voltage() const { return {w_d, w_q}; }
};

struct FullOrderParams {
    // Passives: R_i + R_g and L_i + L_g match the simplified plant.
    double R_i = 1.0;
    double L_i = 2.5e-3;
    double R_g = 0.3;
    double L_g = 1.0e-3;
    double C = 1.0e-6;

    double E = 120.0; ///< grid phase voltage (V rms); the peak dq vector is sqrt2*E
    double omega_nom = 2.0 * std::numbers::pi * 60.0;
    double V_nom = 120.0;

    // Controller gains; see default_loop_gains().
    double k_p_pll = 0.0;
    double k_i_pll = 0.0;
    double k_pv = 0.0;
    double k_iv = 0.0;
    double k_pi = 0.0;
    double k_ii = 0.0;

    double i_max = 4.167;

    void validate() const {
        auto fail = [](const char* field, const char* why) {
            throw DomainError(std::string("FullOrderParams.") + field + ": " + why);
        };
        const std::pair<const char*, double> passives[] = {{"R_i", R_i}, {"L_i", L_i}, {"R_g", R_g}, {"L_g", L_g},
                                                           {"C", C},     {"E", E},     {"V_nom", V_nom},
                                                           {"i_max", i_max}};
        for (const auto& [name, v] : passives)
            if (!(std::isfinite(v) && v > 0.0)) fail(name, "must be finite and > 0");
        const std::pair<const char*, double> gains[] = {{"k_p_pll", k_p_pll}, {"k_i_pll", k_i_pll},
                                                        {"k_pv", k_pv},       {"k_iv", k_iv},
                                                        {"k_pi", k_pi},       {"k_ii", k_ii}};
        for (const auto& [name, v] : gains)
            if (!(std::isfinite(v) && v >= 0.0)) fail(name, "must be finite and >= 0");
        if (!std::isfinite(omega_nom)) fail("omega_nom", "not finite");
    }
};

/// Loop-shaping stand-ins for the inner controller gains.
struct LoopShaping {
    double current_bandwidth = 2.0 * std::numbers::pi * 10000.0; ///< rad/s
    double voltage_ratio = 0.1;   ///< voltage-loop bandwidth / current-loop bandwidth
    double voltage_zero_ratio = 0.2; ///< PI zero / voltage-loop bandwidth
    double pll_natural = 2.0 * std::numbers::pi * 20.0;
    double pll_damping = std::numbers::sqrt2 / 2.0;
};

/// Current loop: pole-zero cancellation of the R_i-L_i branch, k_pi = L_i w_c,
/// k_ii = R_i w_c. Voltage loop: k_pv = C w_v, k_iv = k_pv * zero_ratio * w_v.
/// PLL: the small-signal loop on W_q ~ sqrt2 E * delta is second order with
/// k_p = 2 zeta w_n / (sqrt2 E), k_i = w_n^2 / (sqrt2 E).
inline void apply_loop_shaping(FullOrderParams& p, const LoopShaping& s = {}) {
    const double wc = s.current_bandwidth;
    const double wv = s.voltage_ratio * wc;
    p.k_pi = p.L_i * wc;
    p.k_ii = p.R_i * wc;
    p.k_pv = p.C * wv;
    p.k_iv = p.k_pv * s.voltage_zero_ratio * wv;
    const double e_pk = std::numbers::sqrt2 * p.E;
    p.k_p_pll = 2.0 * s.pll_damping * s.pll_natural / e_pk;
    p.k_i_pll = s.pll_natural * s.pll_natural / e_pk;
}

inline FullOrderParams default_fullorder_params() {
    FullOrderParams p;
    apply_loop_shaping(p);
    return p;
}

/// Full-order parameters whose series passives and grid match `simple`.
inline FullOrderParams fullorder_params_matching(const PlantParams& simple, double inverter_share_R = 1.0 / 1.3,
                                                 double inverter_share_L = 2.5 / 3.5) {
    FullOrderParams p = default_fullorder_params();
    p.R_i = simple.R_ohm * inverter_share_R;
    p.R_g = simple.R_ohm - p.R_i;
    p.L_i = simple.L_H * inverter_share_L;
    p.L_g = simple.L_H - p.L_i;
    p.E = simple.E_V;
    p.omega_nom = simple.omega_nom;
    p.V_nom = simple.V_nom;
    p.i_max = simple.I_max;
    apply_loop_shaping(p);
    return p;
}

/// Setpoints of the outer loop u = [V; delta_i] = -K (I_g - I*) + [V*; delta*].
struct FullOrderReference {
    double i_d_ref = 0.0;
    double i_q_ref = 0.0;
    double v_star = 0.0;     ///< voltage magnitude setpoint (V rms)
    double delta_star = 0.0; ///< voltage angle setpoint (rad)
};

/// Intermediate signals of one derivative evaluation.
struct FullOrderSignals {
    double v = 0.0;       ///< outer-loop voltage magnitude
    double delta_i = 0.0; ///< outer-loop voltage angle
    Vec2 i_ref_raw = Vec2::Zero();
    Vec2 i_ref_sat = Vec2::Zero();
    Vec2 v_inv = Vec2::Zero(); ///< inverter terminal voltage (V_d, V_q)
    double omega_ref = 0.0;
};

inline FullOrderState fullorder_derivative(const FullOrderState& x, const FullOrderParams& p, const Mat2& K,
                                           const FullOrderReference& ref, FullOrderSignals* sig = nullptr) {
    const double sq2 = std::numbers::sqrt2;

    // Outer static gain on the grid-side current error. The references and
    // the voltage angle are grid-referenced; the PLL angle maps them into the
    // controller frame (vec_pll = R(-delta_pll) vec_grid).
    const Vec2 ig_grid = rotation(x.delta_pll) * Vec2(x.i_gd, x.i_gq);
    const Vec2 err = ig_grid - Vec2(ref.i_d_ref, ref.i_q_ref);
    const Vec2 u = Vec2(ref.v_star, ref.delta_star) - K * err;
    const double v = u[0];
    const double delta_i = u[1];
    const double w_ref_d = sq2 * v * std::cos(delta_i - x.delta_pll);
    const double w_ref_q = sq2 * v * std::sin(delta_i - x.delta_pll);

    // PLL: frame speed deviation from the capacitor q-voltage.
    const double d_delta_pll = p.k_i_pll * x.pi_pll + p.k_p_pll * x.w_q;
    const double omega_ref = p.omega_nom + d_delta_pll;

    // Voltage loop -> inverter current reference, limited radially.
    const Vec2 i_ref_raw(-p.C * p.omega_nom * x.w_q + p.k_iv * x.phi_d + p.k_pv * (w_ref_d - x.w_d) + x.i_gd,
                         p.C * p.omega_nom * x.w_d + p.k_iv * x.phi_q + p.k_pv * (w_ref_q - x.w_q) + x.i_gq);
    const Vec2 i_ref = saturate(i_ref_raw, p.i_max);

    // Current loop -> inverter terminal voltage.
    const double v_d = -p.L_i * p.omega_nom * x.i_iq + p.k_ii * x.gamma_d + p.k_pi * (i_ref[0] - x.i_id) + x.w_d;
    const double v_q = p.L_i * p.omega_nom * x.i_id + p.k_ii * x.gamma_q + p.k_pi * (i_ref[1] - x.i_iq) + x.w_q;

    const double e_pk = sq2 * p.E;
    FullOrderState dx;
    dx.delta_pll = d_delta_pll;
    dx.pi_pll = x.w_q;
    dx.phi_d = w_ref_d - x.w_d;
    dx.phi_q = w_ref_q - x.w_q;
    dx.gamma_d = -x.i_id + i_ref[0];
    dx.gamma_q = -x.i_iq + i_ref[1];
    dx.i_id = omega_ref * x.i_iq - p.R_i * x.i_id / p.L_i + (v_d - x.w_d) / p.L_i;
    dx.i_iq = -omega_ref * x.i_id - p.R_i * x.i_iq / p.L_i + (v_q - x.w_q) / p.L_i;
    dx.w_d = omega_ref * x.w_q + (-x.i_gd + x.i_id) / p.C;
    dx.w_q = -omega_ref * x.w_d + (-x.i_gq + x.i_iq) / p.C;
    dx.i_gd = omega_ref * x.i_gq - p.R_g * x.i_gd / p.L_g + (-e_pk * std::cos(x.delta_pll) + x.w_d) / p.L_g;
    dx.i_gq = -omega_ref * x.i_gd - p.R_g * x.i_gq / p.L_g + (e_pk * std::sin(x.delta_pll) + x.w_q) / p.L_g;

    if (sig) {
        sig->v = v;
        sig->delta_i = delta_i;
        sig->i_ref_raw = i_ref_raw;
        sig->i_ref_sat = i_ref;
        sig->v_inv = Vec2(v_d, v_q);
        sig->omega_ref = omega_ref;
    }
    return dx;
}

inline FullOrderState::Array axpy(const FullOrderState::Array& x, double a, const FullOrderState::Array& k) {
    FullOrderState::Array out;
    for (std::size_t i = 0; i < FullOrderState::size; ++i) out[i] = x[i] + a * k[i];
    return out;
}

/// One classic RK4 step of size h.
inline FullOrderState rk4_step(const FullOrderState& x, const FullOrderParams& p, const Mat2& K,
                               const FullOrderReference& ref, double h) {
    auto f = [&](const FullOrderState::Array& s) {
        return fullorder_derivative(FullOrderState::from_array(s), p, K, ref).to_array();
    };
    const auto x0 = x.to_array();
    const auto k1 = f(x0);
    const auto k2 = f(axpy(x0, 0.5 * h, k1));
    const auto k3 = f(axpy(x0, 0.5 * h, k2));
    const auto k4 = f(axpy(x0, h, k3));
    FullOrderState::Array out;
    for (std::size_t i = 0; i < FullOrderState::size; ++i)
        out[i] = x0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return FullOrderState::from_array(out);
}

struct FullOrderSample {
    double t = 0.0;
    FullOrderState state;
};

struct FullOrderTrajectory {
    std::vector<FullOrderSample> samples;
    const FullOrderState& final_state() const { return samples.back().state; }
};

/// Integrates to t_end with step dt_int and records every `sample_dt`
/// (rounded to a whole number of steps; 0 records every step).
inline FullOrderTrajectory integrate_fullorder(const FullOrderState& x0, const FullOrderParams& p, const Mat2& K,
                                               const FullOrderReference& ref, double t_end, double dt_int,
                                               double sample_dt = 0.0) {
    if (!(dt_int > 0.0)) throw PreconditionError("integrate_fullorder: dt_int must be > 0");
    if (!(t_end > 0.0)) throw PreconditionError("integrate_fullorder: t_end must be > 0");
    p.validate();

    const auto n_steps = static_cast<std::size_t>(std::llround(t_end / dt_int));
    const std::size_t stride =
        sample_dt > 0.0 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(sample_dt / dt_int))) : 1;

    FullOrderTrajectory traj;
    traj.samples.reserve(n_steps / stride + 2);
    traj.samples.push_back({0.0, x0});
    FullOrderState x = x0;
    for (std::size_t k = 1; k <= n_steps; ++k) {
        const auto diverged = [&] {
            return SolverError("integrate_fullorder: state diverged at t = " +
                               std::to_string(static_cast<double>(k) * dt_int) + " s");
        };
        // An intermediate stage can overflow before the step result does.
        try {
            x = rk4_step(x, p, K, ref, dt_int);
        } catch (const DomainError&) {
            throw diverged();
        }
        if (!x.finite()) throw diverged();
        if (k % stride == 0 || k == n_steps) traj.samples.push_back({static_cast<double>(k) * dt_int, x});
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Power references
// ---------------------------------------------------------------------------

/// Steady-state voltage (V rms, angle relative to the grid) at the capacitor
/// bus that delivers the current `i_grid` (grid frame) into the stiff grid
/// through the grid-side branch.
inline std::pair<double, double> pcc_voltage_for(const Vec2& i_grid, const FullOrderParams& p) {
    const double e_pk = std::numbers::sqrt2 * p.E;
    const double xg = p.omega_nom * p.L_g;
    const double w_d = e_pk + p.R_g * i_grid[0] - xg * i_grid[1];
    const double w_q = p.R_g * i_grid[1] + xg * i_grid[0];
    return {std::hypot(w_d, w_q) / std::numbers::sqrt2, std::atan2(w_q, w_d)};
}

/// Maps (P, Q) to the grid frame current for a bus voltage V* at angle delta*
/// (V rms): I = sqrt2 / (3 V*^2) [V_d*, V_q*; V_q*, -V_d*] [P; Q]. At V* = V_nom,
/// delta* = 0 this is exactly power_to_current.
inline Vec2 power_to_current_at(double p_ref, double q_ref, double v_star, double delta_star) {
    const double vd = v_star * std::cos(delta_star);
    const double vq = v_star * std::sin(delta_star);
    const double s = std::numbers::sqrt2 / (3.0 * v_star * v_star);
    return {s * (vd * p_ref + vq * q_ref), s * (vq * p_ref - vd * q_ref)};
}

struct PowerFlowSolution {
    double v_star = 0.0;     ///< capacitor-bus voltage (V rms)
    double delta_star = 0.0; ///< angle relative to the grid (rad)
    Vec2 i_grid = Vec2::Zero(); ///< grid-frame current
    std::size_t iterations = 0;
};

/// Two-bus power flow: (P, Q) injected at the capacitor bus, stiff grid E at
/// angle 0 behind R_g + j w L_g. Fixed-point iteration on the bus voltage.
inline PowerFlowSolution solve_power_flow(double p_ref, double q_ref, const FullOrderParams& p,
                                          std::size_t max_iter = 200, double tol = 1e-13) {
    if (!std::isfinite(p_ref) || !std::isfinite(q_ref)) throw DomainError("power flow: non-finite setpoint");
    PowerFlowSolution s;
    s.v_star = p.E;
    s.delta_star = 0.0;
    for (std::size_t k = 1; k <= max_iter; ++k) {
        const Vec2 i = power_to_current_at(p_ref, q_ref, s.v_star, s.delta_star);
        const auto [v, d] = pcc_voltage_for(i, p);
        if (!std::isfinite(v) || !std::isfinite(d) || v <= 0.0) break;
        const double change = std::abs(v - s.v_star) + p.E * std::abs(d - s.delta_star);
        s.v_star = v;
        s.delta_star = d;
        s.i_grid = i;
        s.iterations = k;
        if (change <= tol * p.E) {
            s.i_grid = power_to_current_at(p_ref, q_ref, s.v_star, s.delta_star);
            return s;
        }
    }
    throw SolverError("power flow did not converge (setpoint too far beyond the line's transfer capability)");
}

/// Outer-loop setpoints for a power step at the capacitor bus: grid-frame
/// current, bus voltage magnitude and its angle relative to the grid.
inline FullOrderReference reference_from_power(double p_ref, double q_ref, const FullOrderParams& p) {
    const PowerFlowSolution pf = solve_power_flow(p_ref, q_ref, p);
    return {pf.i_grid[0], pf.i_grid[1], pf.v_star, pf.delta_star};
}

/// Equilibrium of the full-order model for an unsaturated setpoint, built
/// from the steady-state circuit equations in the PLL frame.
inline FullOrderState fullorder_equilibrium(double p_ref, double q_ref, const FullOrderParams& p) {
    const PowerFlowSolution pf = solve_power_flow(p_ref, q_ref, p);
    const Vec2 ig = rotation(-pf.delta_star) * pf.i_grid;
    const double w = std::numbers::sqrt2 * pf.v_star;
    const double wn = p.omega_nom;

    FullOrderState x;
    x.delta_pll = pf.delta_star;
    x.pi_pll = 0.0;
    x.w_d = w;
    x.w_q = 0.0;
    x.i_gd = ig[0];
    x.i_gq = ig[1];
    // Capacitor: 0 = w W_q + (I_i - I_g)/C etc.
    x.i_id = ig[0] - wn * p.C * x.w_q;
    x.i_iq = ig[1] + wn * p.C * x.w_d;
    // Voltage loop settles with zero proportional error: I_i* = I_i.
    if (p.k_iv > 0.0) {
        x.phi_d = (x.i_id - (-p.C * wn * x.w_q + x.i_gd)) / p.k_iv;
        x.phi_q = (x.i_iq - (p.C * wn * x.w_d + x.i_gq)) / p.k_iv;
    }
    // Current loop: V_dq = R_i I_i + W with decoupling.
    if (p.k_ii > 0.0) {
        x.gamma_d = (p.R_i * x.i_id) / p.k_ii;
        x.gamma_q = (p.R_i * x.i_iq) / p.k_ii;
    }
    return x;
}

// ---------------------------------------------------------------------------
// Comparison against the simplified model
// ---------------------------------------------------------------------------

struct PowerStep {
    double p_from = 0.0;
    double q_from = 0.0;
    double p_ref = 0.0;
    double q_ref = 0.0;
};

struct CompareOptions {
    double t_end = 0.05;
    double dt_int = 1e-6;
    double settle_band = 0.02; ///< relative to each model's own final value
};

struct ModelComparison {
    std::vector<double> t;
    std::vector<Vec2> simplified;  ///< simplified-model current
    std::vector<Vec2> full_grid;   ///< full-order grid-side current, grid frame
    std::vector<FullOrderState> full_states;

    Vec2 ss_simplified = Vec2::Zero();
    Vec2 ss_full = Vec2::Zero();
    double steady_state_offset = 0.0;     ///< |ss_full - ss_simplified|
    double steady_state_offset_rel = 0.0; ///< relative to |ss_simplified|
    double settle_simplified = 0.0;       ///< s
    double settle_full = 0.0;
    double max_mag_simplified = 0.0;
    double max_mag_full = 0.0;
    double overshoot_simplified = 0.0; ///< max(0, max |I| - i_max)
    double overshoot_full = 0.0;
    double max_discrepancy = 0.0; ///< max_t |full - simplified|
};

/// Last sample time at which |y - y_final| exceeds band * max(|y_final|, floor).
inline double settling_time(const std::vector<double>& t, const std::vector<Vec2>& y, double band,
                            double floor = 1e-3) {
    if (y.empty()) return 0.0;
    const Vec2 fin = y.back();
    const double tol = band * std::max(fin.norm(), floor);
    double ts = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if ((y[i] - fin).norm() > tol) ts = t[i];
    return ts;
}

/// Runs both models through the same power step with the same outer gain.
/// Both start at the equilibrium of the `from` setpoint and are sampled on
/// the simplified model's time step.
inline ModelComparison compare_models(const FullOrderParams& full, const PlantParams& simple, const Mat2& K,
                                      const PowerStep& step, const CompareOptions& opt = {}) {
    full.validate();
    simple.validate();
    if (std::abs(full.R_i + full.R_g - simple.R_ohm) > 1e-9 * simple.R_ohm ||
        std::abs(full.L_i + full.L_g - simple.L_H) > 1e-9 * simple.L_H)
        throw PreconditionError("compare_models: R_i + R_g and L_i + L_g must match the simplified plant");

    ModelComparison cmp;
    const auto n = static_cast<std::size_t>(std::llround(opt.t_end / simple.dt));

    // Simplified model.
    const LinearPlant plant = build_plant(simple);
    const State x_from = power_to_current(step.p_from, step.q_from, simple);
    const State x_to = power_to_current(step.p_ref, step.q_ref, simple);
    SimulateOptions so;
    so.stop.max_steps = std::max<std::size_t>(n, 1);
    so.stop.tol = 1e-13;
    so.stop.window = 10;
    const Trajectory st = simulate(plant, Gain(K), x_from, x_to, equilibrium_input(plant, x_to), so);

    // Full-order model.
    const FullOrderState x0 = fullorder_equilibrium(step.p_from, step.q_from, full);
    const FullOrderReference ref = reference_from_power(step.p_ref, step.q_ref, full);
    const FullOrderTrajectory ft = integrate_fullorder(x0, full, K, ref, opt.t_end, opt.dt_int, simple.dt);

    const std::size_t m = ft.samples.size();
    cmp.t.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto& fs = ft.samples[i];
        cmp.t.push_back(fs.t);
        cmp.full_states.push_back(fs.state);
        cmp.full_grid.push_back(rotation(fs.state.delta_pll) * fs.state.grid_current());
        // The simplified run stops once exactly stationary; hold its last value.
        cmp.simplified.push_back(st.records[std::min(i, st.records.size() - 1)].state.vec());
    }

    cmp.ss_simplified = cmp.simplified.back();
    cmp.ss_full = cmp.full_grid.back();
    cmp.steady_state_offset = (cmp.ss_full - cmp.ss_simplified).norm();
    cmp.steady_state_offset_rel = cmp.steady_state_offset / std::max(cmp.ss_simplified.norm(), 1e-12);
    cmp.settle_simplified = settling_time(cmp.t, cmp.simplified, opt.settle_band);
    cmp.settle_full = settling_time(cmp.t, cmp.full_grid, opt.settle_band);
    for (std::size_t i = 0; i < m; ++i) {
        cmp.max_mag_simplified = std::max(cmp.max_mag_simplified, cmp.simplified[i].norm());
        cmp.max_mag_full = std::max(cmp.max_mag_full, cmp.full_grid[i].norm());
        cmp.max_discrepancy = std::max(cmp.max_discrepancy, (cmp.full_grid[i] - cmp.simplified[i]).norm());
    }
    cmp.overshoot_simplified = std::max(0.0, cmp.max_mag_simplified - simple.I_max);
    cmp.overshoot_full = std::max(0.0, cmp.max_mag_full - full.i_max);
    return cmp;
}

/// Largest state difference at t_end between steps dt_int and dt_int / 2.
inline double rk4_halving_difference(const FullOrderState& x0, const FullOrderParams& p, const Mat2& K,
                                     const FullOrderReference& ref, double t_end, double dt_int) {
    const auto a = integrate_fullorder(x0, p, K, ref, t_end, dt_int, t_end).final_state().to_array();
    const auto b = integrate_fullorder(x0, p, K, ref, t_end, 0.5 * dt_int, t_end).final_state().to_array();
    double d = 0.0;
    for (std::size_t i = 0; i < FullOrderState::size; ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

} // namespace maglim
