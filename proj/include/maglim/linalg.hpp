#pragma once

// Closed-form helpers for the 2x2 matrices that appear everywhere in this
// library. Everything here is exact arithmetic on four entries; no iterative
// decompositions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace maglim {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline Mat2 rotation(double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    Mat2 r;
    r << c, -s, s, c;
    return r;
}

inline bool all_finite(const Vec2& v) { return std::isfinite(v[0]) && std::isfinite(v[1]); }
inline bool all_finite(const Mat2& m) { return m.allFinite(); }

struct SymmetricEigenvalues {
    double lo;
    double hi;
};

/// Eigenvalues of a symmetric 2x2 matrix from the characteristic quadratic.
/// The off-diagonal is symmetrized first so slightly asymmetric round-off
/// does not matter.
inline SymmetricEigenvalues symmetric_eigenvalues(const Mat2& s) {
    const double a = s(0, 0);
    const double d = s(1, 1);
    const double b = 0.5 * (s(0, 1) + s(1, 0));
    const double mean = 0.5 * (a + d);
    const double radius = std::hypot(0.5 * (a - d), b);
    return {mean - radius, mean + radius};
}

/// Signed singular value decomposition M = R(phi) diag(s_major, s_minor) R(theta)
/// with s_major >= |s_minor|. s_minor carries the sign of det(M).
struct Svd2 {
    double phi;
    double theta;
    double s_major;
    double s_minor;

    Mat2 compose() const {
        return rotation(phi) * Vec2(s_major, s_minor).asDiagonal() * rotation(theta);
    }
};

inline Svd2 svd2(const Mat2& m) {
    const double e = 0.5 * (m(0, 0) + m(1, 1));
    const double f = 0.5 * (m(0, 0) - m(1, 1));
    const double g = 0.5 * (m(1, 0) + m(0, 1));
    const double h = 0.5 * (m(1, 0) - m(0, 1));
    const double q = std::hypot(e, h);
    const double r = std::hypot(f, g);
    const double a1 = std::atan2(g, f);
    const double a2 = std::atan2(h, e);
    return {0.5 * (a2 + a1), 0.5 * (a2 - a1), q + r, q - r};
}

/// Largest singular value.
inline double spectral_norm(const Mat2& m) {
    const double p = std::hypot(m(0, 0) + m(1, 1), m(1, 0) - m(0, 1));
    const double q = std::hypot(m(0, 0) - m(1, 1), m(1, 0) + m(0, 1));
    return 0.5 * (p + q);
}

/// Euclidean projection (Frobenius metric) onto {M : sigma_max(M) <= radius}:
/// clip both singular values at radius.
inline Mat2 project_spectral_ball(const Mat2& m, double radius) {
    if (spectral_norm(m) <= radius) return m;
    Svd2 d = svd2(m);
    d.s_major = std::min(d.s_major, radius);
    d.s_minor = std::clamp(d.s_minor, -radius, radius);
    return d.compose();
}

} // namespace maglim
