#pragma once

#include "maglim/linalg.hpp"

#include <optional>

namespace maglim {

/// Record attached to a gain that passed the circular-Lyapunov test against a
/// particular plant.
struct Certificate {
    double sigma_closed = 0.0; ///< spectral norm of A - B K
    double margin = 0.0;       ///< 1 - sigma_closed
};

/// Static feedback u = u_ref - K (x - x_ref).
struct Gain {
    Mat2 K = Mat2::Zero();
    std::optional<Certificate> certificate;

    Gain() = default;
    explicit Gain(const Mat2& k) : K(k) {}
    static Gain from_rows(double k11, double k12, double k21, double k22) {
        Mat2 k;
        k << k11, k12, k21, k22;
        return Gain(k);
    }
};

/// Gains printed in the reference experiment: the LQR baseline and the
/// MPC-fitted controller.
inline Gain reference_baseline_gain() { return Gain::from_rows(1.206, 0.0957, 0.096, 0.0671); }
inline Gain reference_fitted_gain() { return Gain::from_rows(0.608, 0.027, 0.012, 0.026); }

} // namespace maglim
