#pragma once

// Circular-Lyapunov certificate for the saturated closed loop.
//
// With V(z) = z'z the closed loop x+ = sat(x_ref + M (x - x_ref)), M = A - B K,
// decreases V whenever M'M - I is negative definite and |x_ref| < i_max: the
// linear part contracts the error and the radial projection can only move the
// state closer to an interior reference. For 2x2 matrices the test reduces to
// sigma_max(M) < 1, evaluated here through the closed-form eigenvalues of M'M.

#include "maglim/error.hpp"
#include "maglim/gain.hpp"
#include "maglim/linalg.hpp"
#include "maglim/plant.hpp"

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace maglim {

inline constexpr double kDefaultCertEpsilon = 1e-9;

struct CertificateReport {
    bool feasible = false;
    double sigma_closed = 0.0;
    /// Eigenvalues of (A - BK)'(A - BK) - I, ascending.
    double eig_lo = 0.0;
    double eig_hi = 0.0;
};

inline Mat2 closed_loop_matrix(const LinearPlant& plant, const Mat2& K) { return plant.A - plant.B * K; }

inline CertificateReport certify_gain(const LinearPlant& plant, const Mat2& K,
                                      double epsilon = kDefaultCertEpsilon) {
    const Mat2 m = closed_loop_matrix(plant, K);
    const auto ev = symmetric_eigenvalues(m.transpose() * m);
    CertificateReport rep;
    rep.eig_lo = ev.lo - 1.0;
    rep.eig_hi = ev.hi - 1.0;
    rep.sigma_closed = std::sqrt(std::max(ev.hi, 0.0));
    rep.feasible = ev.hi <= 1.0 - epsilon;
    return rep;
}

/// Returns `gain` with a certificate attached, or without one if it fails.
inline Gain issue_certificate(const LinearPlant& plant, Gain gain, double epsilon = kDefaultCertEpsilon) {
    const auto rep = certify_gain(plant, gain.K, epsilon);
    gain.certificate.reset();
    if (rep.feasible) gain.certificate = Certificate{rep.sigma_closed, 1.0 - rep.sigma_closed};
    return gain;
}

// ---------------------------------------------------------------------------
// Robustness to the line resistance
// ---------------------------------------------------------------------------

/// Symmetric part of the first-order (dt -> 0) expansion of the certificate,
/// Ahat' + K'Bhat' + Ahat + Bhat K with A = I - dt*Ahat and B = dt*Bhat.
/// The certificate holds to first order iff this is positive definite.
inline Mat2 first_order_matrix(const PlantParams& params, const Mat2& K) {
    const Mat2 a_hat = -params.state_matrix_ct();
    const Mat2 b_hat = params.input_matrix_ct();
    return a_hat.transpose() + K.transpose() * b_hat.transpose() + a_hat + b_hat * K;
}

inline double first_order_margin(const PlantParams& params, const Mat2& K) {
    return symmetric_eigenvalues(first_order_matrix(params, K)).lo;
}

struct RobustnessSample {
    double R_ohm = 0.0;
    CertificateReport report;
};

struct RobustnessReport {
    double first_order_margin = 0.0; ///< lambda_min at the nominal R
    bool first_order_holds = false;
    std::vector<RobustnessSample> samples;
    bool all_feasible = false;
};

/// Checks that a gain certified at the nominal resistance stays certified for
/// R in [R_nominal, R_nominal + r_grid_max].
inline RobustnessReport certify_robust(const PlantParams& params, const Mat2& K, double r_grid_max,
                                       std::size_t n_samples, double epsilon = kDefaultCertEpsilon) {
    if (!(r_grid_max >= 0.0)) throw PreconditionError("certify_robust: r_grid_max must be >= 0");
    if (!certify_gain(build_plant(params), K, epsilon).feasible)
        throw PreconditionError("certify_robust: gain is not certified at the nominal resistance");

    RobustnessReport rep;
    rep.first_order_margin = first_order_margin(params, K);
    rep.first_order_holds = rep.first_order_margin > 0.0;
    rep.all_feasible = true;
    const std::size_t n = std::max<std::size_t>(n_samples, 1);
    for (std::size_t i = 0; i < n; ++i) {
        PlantParams p = params;
        p.R_ohm = params.R_ohm + (n == 1 ? 0.0 : r_grid_max * static_cast<double>(i) / static_cast<double>(n - 1));
        // Large resistances can leave the forward-Euler validity region.
        if (p.dt * p.R_ohm / p.L_H >= 1.0) break;
        RobustnessSample s{p.R_ohm, certify_gain(build_plant(p), K, epsilon)};
        rep.all_feasible = rep.all_feasible && s.report.feasible;
        rep.samples.push_back(s);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Trajectory audit
// ---------------------------------------------------------------------------

enum class AuditViolation {
    None,
    NoDecrease,         ///< |x_{t} - x_ref| did not strictly decrease
    ClipDidNotContract, ///< saturation did not move the state toward x_ref
    LinearDidNotContract,
};

inline const char* to_string(AuditViolation v) {
    switch (v) {
    case AuditViolation::None: return "none";
    case AuditViolation::NoDecrease: return "no_decrease";
    case AuditViolation::ClipDidNotContract: return "clip_did_not_contract";
    case AuditViolation::LinearDidNotContract: return "linear_did_not_contract";
    }
    return "unknown";
}

struct AuditReport {
    bool clean = true;
    std::size_t first_violation = 0;
    AuditViolation kind = AuditViolation::None;
    std::size_t checked_steps = 0;
    std::size_t saturated_steps = 0;
};

/// Verifies the Lyapunov decrease chain on a recorded trajectory. Steps whose
/// previous error is at or below `tolerance` are skipped. Saturated steps are
/// additionally checked link by link when pre-saturation states were recorded:
///   |x_t - x_ref| < |z_t - x_ref| < |x_{t-1} - x_ref|.
inline AuditReport audit_lyapunov(const Trajectory& traj, const State& x_ref, double tolerance = 1e-9) {
    if (traj.empty()) throw PreconditionError("audit_lyapunov: empty trajectory");
    AuditReport rep;
    const Vec2 xr = x_ref.vec();
    auto fail = [&](std::size_t t, AuditViolation kind) {
        rep.clean = false;
        rep.first_violation = t;
        rep.kind = kind;
        return rep;
    };
    for (std::size_t i = 1; i < traj.records.size(); ++i) {
        const auto& prev = traj.records[i - 1];
        const auto& cur = traj.records[i];
        const double e_prev = (prev.state.vec() - xr).norm();
        if (e_prev <= tolerance) continue;
        ++rep.checked_steps;
        const double e_cur = (cur.state.vec() - xr).norm();
        if (cur.saturated && cur.presat) {
            ++rep.saturated_steps;
            const double e_pre = (cur.presat->vec() - xr).norm();
            if (!(e_cur < e_pre)) return fail(cur.t, AuditViolation::ClipDidNotContract);
            if (!(e_pre < e_prev)) return fail(cur.t, AuditViolation::LinearDidNotContract);
        }
        if (!(e_cur < e_prev)) return fail(cur.t, AuditViolation::NoDecrease);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Boundary fixed points
// ---------------------------------------------------------------------------

struct StuckSearchOptions {
    std::size_t n_angles = 3600;
    double angle_tol = 1e-10;
    /// Points closer than this (relative to i_max) to x_ref are not reported.
    double exclusion = 1e-6;
};

/// Searches the saturation circle for fixed points of
/// x -> sat(x_ref + (A - BK)(x - x_ref)) other than x_ref. A boundary point x
/// is fixed iff the unsaturated update is a non-negative multiple >= 1 of x,
/// i.e. its tangential component vanishes and its radial component is at
/// least i_max.
inline std::vector<State> find_stuck_points(const LinearPlant& plant, const Mat2& K, const State& x_ref,
                                            const StuckSearchOptions& opt = {}) {
    const Mat2 m = closed_loop_matrix(plant, K);
    const Vec2 xr = x_ref.vec();
    const double r = plant.i_max;
    auto point = [&](double phi) { return Vec2(r * std::cos(phi), r * std::sin(phi)); };
    auto update = [&](double phi) { return Vec2(xr + m * (point(phi) - xr)); };
    auto tangential = [&](double phi) {
        const Vec2 z = update(phi);
        return -std::sin(phi) * z[0] + std::cos(phi) * z[1];
    };

    std::vector<State> found;
    const double h = 2.0 * std::numbers::pi / static_cast<double>(opt.n_angles);
    double a = 0.0;
    double fa = tangential(a);
    for (std::size_t i = 1; i <= opt.n_angles; ++i) {
        double b = h * static_cast<double>(i);
        double fb = tangential(b);
        if (fa == 0.0 || (fa < 0.0) != (fb < 0.0)) {
            double lo = a, hi = b, flo = fa;
            while (hi - lo > opt.angle_tol) {
                const double mid = 0.5 * (lo + hi);
                const double fm = tangential(mid);
                if ((fm < 0.0) == (flo < 0.0) && fm != 0.0) {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            const double phi = 0.5 * (lo + hi);
            const Vec2 x = point(phi);
            const Vec2 z = update(phi);
            const double radial = z.dot(x) / r;
            const bool outward = radial >= r * (1.0 - 1e-12);
            const bool distinct = (x - xr).norm() > opt.exclusion * r;
            const bool duplicate =
                !found.empty() && (found.back().vec() - x).norm() < 10.0 * opt.angle_tol * r;
            if (outward && distinct && !duplicate) found.push_back(State::from(x));
        }
        a = b;
        fa = fb;
    }
    return found;
}

inline std::optional<State> find_stuck_point(const LinearPlant& plant, const Mat2& K, const State& x_ref,
                                             const StuckSearchOptions& opt = {}) {
    auto pts = find_stuck_points(plant, K, x_ref, opt);
    if (pts.empty()) return std::nullopt;
    return pts.front();
}

} // namespace maglim
