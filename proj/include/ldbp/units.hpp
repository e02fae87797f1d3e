#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

namespace ldbp {

using cplx = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kPlanck = 6.62607015e-34;   // J s
inline constexpr double kSpeedOfLight = 299792458.0; // m/s

/// Kerr prefactor of the Manakov equation.
inline constexpr double kManakovFactor = 8.0 / 9.0;

inline double dbm_to_watt(double dbm) {
    if (dbm == -std::numeric_limits<double>::infinity()) return 0.0;
    return std::pow(10.0, (dbm - 30.0) / 10.0);
}

inline double watt_to_dbm(double w) { return 10.0 * std::log10(w) + 30.0; }

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double linear_to_db(double x) { return 10.0 * std::log10(x); }

/// Power attenuation coefficient in 1/km from dB/km.
inline double db_per_km_to_neper(double a_db) { return a_db * std::log(10.0) / 10.0; }

/// exp(j phi). Small angles (every Kerr step in practice) use a truncated
/// series whose remainder is far below one ulp; libm is slow on this path.
inline std::complex<double> unit_phasor(double phi) {
    if (std::abs(phi) < 0.125) {
        const double q = phi * phi;
        const double s = phi * (1.0 + q * (-1.0 / 6 + q * (1.0 / 120 + q * (-1.0 / 5040 + q * (1.0 / 362880 + q * (-1.0 / 39916800))))));
        const double c = 1.0 + q * (-0.5 + q * (1.0 / 24 + q * (-1.0 / 720 + q * (1.0 / 40320 + q * (-1.0 / 3628800 + q * (1.0 / 479001600))))));
        return {c, s};
    }
    return std::polar(1.0, phi);
}

inline constexpr double kPs = 1e-12;
inline constexpr double kPs2PerKm = 1e-24; // ps^2/km -> s^2/km

} // namespace ldbp
