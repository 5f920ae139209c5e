#pragma once

// Least-squares fit of a static gain to (state error, input) samples under the
// circular-Lyapunov constraint sigma_max(A - B K) <= 1 - margin.
//
// The constraint is a spectral-norm ball in M = A - B K, so the problem is
// solved in M (K = B^-1 (A - M)) by accelerated projected gradient with the
// closed-form singular-value clipping as the projection. The objective only
// depends on the dataset through its second moments, so an iteration costs a
// handful of 2x2 products regardless of dataset size.

#include "maglim/certify.hpp"
#include "maglim/error.hpp"
#include "maglim/gain.hpp"
#include "maglim/linalg.hpp"
#include "maglim/plant.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace maglim {

struct Sample {
    std::size_t traj_id = 0;
    std::size_t t = 0;
    Vec2 delta_x = Vec2::Zero(); ///< x_t - x_ref
    Vec2 u = Vec2::Zero();       ///< applied input minus the equilibrium input
};

struct Dataset {
    std::vector<Sample> samples;
    /// Indices into the (x_init, x_ref) grids per trajectory id, when known.
    std::vector<std::pair<std::size_t, std::size_t>> provenance;

    bool empty() const { return samples.empty(); }
    std::size_t size() const { return samples.size(); }

    void validate() const {
        for (const auto& s : samples)
            if (!all_finite(s.delta_x) || !all_finite(s.u))
                throw DomainError("Dataset: non-finite sample in trajectory " + std::to_string(s.traj_id));
    }
};

/// Sufficient statistics of sum_i |K dx_i + u_i|^2 = tr(K S K') + 2 tr(K C') + uu.
struct Moments {
    Mat2 S = Mat2::Zero(); ///< sum dx dx'
    Mat2 C = Mat2::Zero(); ///< sum u dx'
    double uu = 0.0;       ///< sum u'u
    std::size_t n = 0;

    static Moments of(const Dataset& d) {
        Moments m;
        for (const auto& s : d.samples) {
            m.S += s.delta_x * s.delta_x.transpose();
            m.C += s.u * s.delta_x.transpose();
            m.uu += s.u.squaredNorm();
        }
        m.n = d.samples.size();
        return m;
    }

    double objective(const Mat2& K) const {
        return std::max(0.0, (K * S * K.transpose()).trace() + 2.0 * (K * C.transpose()).trace() + uu);
    }
    Mat2 gradient(const Mat2& K) const { return 2.0 * (K * S + C); }
};

/// Direct evaluation of the fitting objective over the samples.
inline double fit_objective(const Dataset& d, const Mat2& K) {
    double f = 0.0;
    for (const auto& s : d.samples) f += (K * s.delta_x + s.u).squaredNorm();
    return f;
}

/// Minimum-norm solution of the normal equations K S = -C.
inline Mat2 unconstrained_fit(const Moments& m) {
    Eigen::CompleteOrthogonalDecomposition<Mat2> cod(m.S);
    // K S = -C  <=>  S K' = -C'  (S symmetric)
    return cod.solve(Mat2(-m.C.transpose())).transpose();
}

struct FitOptions {
    double margin = 1e-6;
    double rel_tol = 1e-12;
    std::size_t window = 100;
    std::size_t max_iter = 20'000'000;
    std::size_t history_limit = 100'000;
};

struct FitDiagnostics {
    bool projected = false; ///< false when the unconstrained minimizer was feasible
    std::size_t iterations = 0;
    std::size_t restarts = 0;
    double objective = 0.0;
    double objective_unconstrained = 0.0;
    Mat2 K_unconstrained = Mat2::Zero();
    /// Accepted objective per iteration (projected runs only, first
    /// `history_limit` iterations).
    std::vector<double> history;
};

struct FitResult {
    Gain gain;
    FitDiagnostics diag;
};

inline FitResult fit_gain_detailed(const LinearPlant& plant, const Dataset& data, const FitOptions& opt = {}) {
    if (data.empty()) throw DomainError("fit_gain: dataset is empty");
    data.validate();
    if (!(opt.margin > 0.0 && opt.margin < 1.0)) throw DomainError("fit_gain: margin must be in (0, 1)");

    const Moments mom = Moments::of(data);
    const double radius = 1.0 - opt.margin;
    const Mat2 b_inv = plant.B.inverse();

    FitResult out;
    auto& diag = out.diag;
    diag.K_unconstrained = unconstrained_fit(mom);
    diag.objective_unconstrained = mom.objective(diag.K_unconstrained);

    auto finish = [&](const Mat2& K) {
        out.gain = issue_certificate(plant, Gain(K));
        diag.objective = mom.objective(K);
        if (!out.gain.certificate || out.gain.certificate->margin < opt.margin - 1e-9)
            throw SolverError("fit_gain: result failed certification (sigma = " +
                              std::to_string(certify_gain(plant, K).sigma_closed) + ")");
        return out;
    };

    if (spectral_norm(closed_loop_matrix(plant, diag.K_unconstrained)) <= radius)
        return finish(diag.K_unconstrained);

    diag.projected = true;
    auto gain_of = [&](const Mat2& M) { return Mat2(b_inv * (plant.A - M)); };
    auto f = [&](const Mat2& M) { return mom.objective(gain_of(M)); };
    // d f / d M = -B^-T (d f / d K)
    auto grad = [&](const Mat2& M) { return Mat2(-b_inv.transpose() * mom.gradient(gain_of(M))); };

    const double b_min = plant.B.diagonal().cwiseAbs().minCoeff();
    const double s_max = symmetric_eigenvalues(mom.S).hi;
    const double lipschitz = std::max(2.0 * s_max / (b_min * b_min), 1e-300);
    const double step = 1.0 / lipschitz;

    // Monotone FISTA with function-value restart.
    Mat2 x = project_spectral_ball(closed_loop_matrix(plant, diag.K_unconstrained), radius);
    double fx = f(x);
    Mat2 y = x;
    double t = 1.0;
    diag.history.push_back(fx);
    // Objective values over the last `window` iterations.
    std::vector<double> ring(opt.window + 1, fx);

    for (std::size_t k = 1; k <= opt.max_iter; ++k) {
        const Mat2 z = project_spectral_ball(y - step * grad(y), radius);
        const double fz = f(z);
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        if (fz <= fx) {
            y = z + ((t - 1.0) / t_next) * (z - x);
            x = z;
            fx = fz;
            t = t_next;
        } else {
            // Momentum overshot: restart from the last accepted point.
            ++diag.restarts;
            y = x;
            t = 1.0;
        }
        if (diag.history.size() < opt.history_limit) diag.history.push_back(fx);
        diag.iterations = k;
        ring[k % ring.size()] = fx;

        if (k >= opt.window) {
            const double old = ring[(k - opt.window) % ring.size()];
            const double scale = std::max({std::abs(fx), std::abs(old), std::numeric_limits<double>::min()});
            if (old - fx <= opt.rel_tol * scale) return finish(gain_of(x));
        }
    }
    throw SolverError("fit_gain: projected gradient did not converge after " + std::to_string(opt.max_iter) +
                      " iterations (objective " + std::to_string(fx) + ")");
}

inline Gain fit_gain(const LinearPlant& plant, const Dataset& data, double margin = 1e-6) {
    FitOptions opt;
    opt.margin = margin;
    return fit_gain_detailed(plant, data, opt).gain;
}

// ---------------------------------------------------------------------------
// Block-matrix form of the constraint
// ---------------------------------------------------------------------------

struct SchurCheck {
    bool positive_definite = false; ///< [I, M'; M, I] > 0
    bool certified = false;         ///< certify_gain on the same inputs
    bool agree = false;
    double min_pivot = 0.0;
};

/// Cholesky of the 4x4 block matrix [I, M'; M, I] with M = A - B K. Pivots at
/// or below `pivot_tol` count as not strictly definite.
inline SchurCheck schur_check(const LinearPlant& plant, const Mat2& K, double pivot_tol = 1e-13) {
    const Mat2 m = closed_loop_matrix(plant, K);
    Eigen::Matrix4d blk = Eigen::Matrix4d::Identity();
    blk.block<2, 2>(0, 2) = m.transpose();
    blk.block<2, 2>(2, 0) = m;

    SchurCheck out;
    out.positive_definite = true;
    out.min_pivot = std::numeric_limits<double>::infinity();
    Eigen::Matrix4d l = Eigen::Matrix4d::Zero();
    for (int j = 0; j < 4; ++j) {
        double d = blk(j, j);
        for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        out.min_pivot = std::min(out.min_pivot, d);
        if (!(d > pivot_tol)) {
            out.positive_definite = false;
            break;
        }
        l(j, j) = std::sqrt(d);
        for (int i = j + 1; i < 4; ++i) {
            double s = blk(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    out.certified = certify_gain(plant, K).feasible;
    out.agree = out.certified == out.positive_definite;
    return out;
}

inline bool schur_equivalence_check(const LinearPlant& plant, const Mat2& K) {
    return schur_check(plant, K).positive_definite;
}

} // namespace maglim
