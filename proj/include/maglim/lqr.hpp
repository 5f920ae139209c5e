#pragma once

#include "maglim/error.hpp"
#include "maglim/gain.hpp"
#include "maglim/linalg.hpp"
#include "maglim/plant.hpp"

#include <cmath>
#include <cstddef>
#include <string>

namespace maglim {

struct LqrWeights {
    Mat2 Q = Vec2(1.0, 0.1).asDiagonal();
    Mat2 R = Mat2::Identity();

    void validate() const {
        if (!all_finite(Q) || !all_finite(R)) throw DomainError("LqrWeights: non-finite entry");
        if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw DomainError("LqrWeights: Q not symmetric");
        if ((R - R.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw DomainError("LqrWeights: R not symmetric");
        if (symmetric_eigenvalues(Q).lo < -1e-12) throw DomainError("LqrWeights: Q not positive semidefinite");
        if (symmetric_eigenvalues(R).lo <= 0.0) throw DomainError("LqrWeights: R not positive definite");
    }
};

/// Q = diag(1, 0.1), R = 5 B for the given discrete plant.
inline LqrWeights reference_weights(const LinearPlant& plant) {
    LqrWeights w;
    w.Q = Vec2(1.0, 0.1).asDiagonal();
    w.R = 5.0 * plant.B;
    return w;
}

struct RiccatiResult {
    Mat2 P = Mat2::Zero();
    Mat2 K = Mat2::Zero();
    std::size_t iterations = 0;
};

inline Mat2 dare_feedback(const LinearPlant& plant, const LqrWeights& w, const Mat2& P) {
    const Mat2& A = plant.A;
    const Mat2& B = plant.B;
    return (w.R + B.transpose() * P * B).ldlt().solve(B.transpose() * P * A);
}

/// One application of the discrete Riccati map.
inline Mat2 riccati_map(const LinearPlant& plant, const LqrWeights& w, const Mat2& P) {
    const Mat2& A = plant.A;
    const Mat2& B = plant.B;
    const Mat2 next = w.Q + A.transpose() * P * A - A.transpose() * P * B * dare_feedback(plant, w, P);
    return 0.5 * (next + next.transpose());
}

/// Fixed-point iteration of the discrete Riccati recursion from P = Q.
inline RiccatiResult solve_dare(const LinearPlant& plant, const LqrWeights& w, std::size_t max_iter = 1'000'000,
                                double rel_tol = 1e-12) {
    w.validate();
    RiccatiResult res;
    Mat2 P = w.Q;
    for (std::size_t k = 1; k <= max_iter; ++k) {
        const Mat2 next = riccati_map(plant, w, P);
        const double change = (next - P).norm();
        P = next;
        if (change <= rel_tol * std::max(P.norm(), 1e-300) || P.norm() == 0.0) {
            res.P = P;
            res.K = dare_feedback(plant, w, P);
            res.iterations = k;
            return res;
        }
    }
    throw SolverError("solve_dare: Riccati iteration did not converge in " + std::to_string(max_iter) +
                      " iterations");
}

/// Discrete-time infinite-horizon LQR gain for u = -K x.
inline Gain lqr_gain(const LinearPlant& plant, const LqrWeights& w) { return Gain(solve_dare(plant, w).K); }

// ---------------------------------------------------------------------------
// Continuous-time design
// ---------------------------------------------------------------------------

/// Symmetric solution of A'P + P A = -C for 2x2 matrices.
inline Mat2 solve_lyapunov_ct(const Mat2& A, const Mat2& C) {
    // Unknowns (p11, p12, p22).
    Eigen::Matrix3d m;
    m << 2 * A(0, 0), 2 * A(1, 0), 0.0,
         A(0, 1), A(0, 0) + A(1, 1), A(1, 0),
         0.0, 2 * A(0, 1), 2 * A(1, 1);
    const Eigen::Vector3d rhs(-C(0, 0), -0.5 * (C(0, 1) + C(1, 0)), -C(1, 1));
    const Eigen::Vector3d p = m.fullPivLu().solve(rhs);
    Mat2 P;
    P << p[0], p[1], p[1], p[2];
    return P;
}

struct CareResult {
    Mat2 P = Mat2::Zero();
    Mat2 K = Mat2::Zero();
    std::size_t iterations = 0;
};

/// Continuous algebraic Riccati equation A'P + PA - P B R^-1 B' P + Q = 0 by
/// Newton-Kleinman iteration.
inline CareResult solve_care(const Mat2& A, const Mat2& B, const LqrWeights& w, std::size_t max_iter = 200,
                             double rel_tol = 1e-14) {
    w.validate();
    auto hurwitz = [](const Mat2& m) { return m.trace() < 0.0 && m.determinant() > 0.0; };
    Mat2 K = Mat2::Zero();
    if (!hurwitz(A)) K = B.partialPivLu().solve(A + Mat2::Identity());

    CareResult res;
    Mat2 P = Mat2::Zero();
    for (std::size_t k = 1; k <= max_iter; ++k) {
        const Mat2 acl = A - B * K;
        const Mat2 next = solve_lyapunov_ct(acl, w.Q + K.transpose() * w.R * K);
        K = w.R.ldlt().solve(B.transpose() * next);
        const double change = (next - P).norm();
        P = next;
        if (change <= rel_tol * std::max(P.norm(), 1e-300)) {
            res.P = P;
            res.K = K;
            res.iterations = k;
            return res;
        }
    }
    throw SolverError("solve_care: Newton-Kleinman iteration did not converge");
}

inline double care_residual(const Mat2& A, const Mat2& B, const LqrWeights& w, const Mat2& P) {
    return (A.transpose() * P + P * A - P * B * w.R.ldlt().solve(B.transpose() * P) + w.Q).norm();
}

/// Recipe that reproduces the published baseline gain: a continuous-time LQR
/// on the RL dynamics with Q = diag(1, 0.1) and R = 5 B, where B is the
/// forward-Euler input matrix evaluated at `design_dt` (100 us by default,
/// not the 10 us simulation step).
struct BaselineRecipe {
    Vec2 q_diag{1.0, 0.1};
    double r_multiplier = 5.0;
    double design_dt = 100e-6;
};

inline LqrWeights baseline_weights(const PlantParams& params, const BaselineRecipe& recipe = {}) {
    LqrWeights w;
    w.Q = recipe.q_diag.asDiagonal();
    w.R = recipe.r_multiplier * recipe.design_dt * params.input_matrix_ct();
    return w;
}

inline Gain baseline_gain(const PlantParams& params, const BaselineRecipe& recipe = {}) {
    params.validate();
    return Gain(solve_care(params.state_matrix_ct(), params.input_matrix_ct(), baseline_weights(params, recipe)).K);
}

} // namespace maglim
