#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ldbp/units.hpp"

namespace ldbp {

/// Lagrange fractional-delay taps d_n = prod_{i != n} (D - i) / (n - i) for a
/// delay of D samples measured from tap 0.
inline std::vector<double> lagrange_taps_at(double delay_samples, std::size_t length) {
    if (length == 0) throw std::invalid_argument("lagrange_taps: length must be positive");
    std::vector<double> d(length, 1.0);
    for (std::size_t n = 0; n < length; ++n)
        for (std::size_t i = 0; i < length; ++i) {
            if (i == n) continue;
            d[n] *= (delay_samples - static_cast<double>(i)) / (static_cast<double>(n) - static_cast<double>(i));
        }
    return d;
}

/// d(taps)/dD for lagrange_taps_at.
inline std::vector<double> lagrange_taps_derivative_at(double delay_samples, std::size_t length) {
    std::vector<double> g(length, 0.0);
    for (std::size_t n = 0; n < length; ++n) {
        for (std::size_t m = 0; m < length; ++m) {
            if (m == n) continue;
            double term = 1.0 / (static_cast<double>(n) - static_cast<double>(m));
            for (std::size_t i = 0; i < length; ++i) {
                if (i == n || i == m) continue;
                term *= (delay_samples - static_cast<double>(i)) / (static_cast<double>(n) - static_cast<double>(i));
            }
            g[n] += term;
        }
    }
    return g;
}

/// Center tap used as the zero-delay reference of a length-F DGD filter.
inline std::size_t dgd_center(std::size_t length) { return length / 2; }

/// Samples of delay applied to the x polarization for a DGD of tau (ps):
/// f_s tau / 2, referenced to the center tap so that tau = 0 is a pure delta.
inline double lagrange_delay_samples(double tau_ps, double sample_rate) {
    return sample_rate * tau_ps * kPs / 2.0;
}

inline std::vector<double> lagrange_taps(double tau_ps, std::size_t length, double sample_rate) {
    return lagrange_taps_at(lagrange_delay_samples(tau_ps, sample_rate) + static_cast<double>(dgd_center(length)), length);
}

/// d(taps)/d(tau) in 1/ps.
inline std::vector<double> lagrange_taps_gradient(double tau_ps, std::size_t length, double sample_rate) {
    auto g = lagrange_taps_derivative_at(
        lagrange_delay_samples(tau_ps, sample_rate) + static_cast<double>(dgd_center(length)), length);
    const double chain = sample_rate * kPs / 2.0;
    for (auto& v : g) v *= chain;
    return g;
}

} // namespace ldbp
