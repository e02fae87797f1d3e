#pragma once

#include <Eigen/Dense>

#include "ldbp/rng.hpp"
#include "ldbp/units.hpp"

namespace ldbp {

using Jones = Eigen::Matrix2cd;

/// [[a, b], [-b*, a*]]; in SU(2) when |a|^2 + |b|^2 == 1.
inline Jones su2_pattern(cplx a, cplx b) {
    Jones m;
    m << a, b, -std::conj(b), std::conj(a);
    return m;
}

/// Haar-uniform SU(2) element from a normalized 4-D Gaussian (unit quaternion).
inline Jones sample_su2(Rng& rng) {
    double q[4];
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (double& v : q) {
            v = rng.normal();
            n2 += v * v;
        }
    } while (n2 == 0.0);
    const double n = std::sqrt(n2);
    return su2_pattern({q[0] / n, q[1] / n}, {q[2] / n, q[3] / n});
}

inline double unitarity_error(const Jones& m) {
    return (m.adjoint() * m - Jones::Identity()).cwiseAbs().maxCoeff();
}

inline bool is_su2(const Jones& m, double tol = 1e-12) {
    if (unitarity_error(m) > tol) return false;
    if (std::abs(m.determinant() - cplx(1.0, 0.0)) > tol) return false;
    return std::abs(m(1, 0) + std::conj(m(0, 1))) <= tol && std::abs(m(1, 1) - std::conj(m(0, 0))) <= tol;
}

/// Stokes vector (S1, S2, S3) of a Jones vector.
inline Eigen::Vector3d stokes(cplx ex, cplx ey) {
    const cplx c = ex * std::conj(ey);
    return {std::norm(ex) - std::norm(ey), 2.0 * c.real(), -2.0 * c.imag()};
}

} // namespace ldbp
