#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ldbp/units.hpp"

namespace ldbp::fir {

/// Circular FIR with tap i applied at delay shift(i) = first + stride * i:
///   out[n] = sum_i t[i] * x[(n - shift(i)) mod N]
/// The same shift convention is used by the adjoint helpers below.
struct Layout {
    long first = 0;
    long stride = 1;
    long shift(std::size_t i) const { return first + stride * static_cast<long>(i); }
};

/// Taps centered on index `center`: shift(i) = i - center.
inline Layout centered(std::size_t center) { return {-static_cast<long>(center), 1}; }
/// Mirror image of centered(): shift(i) = center - i.
inline Layout mirrored(std::size_t center) { return {static_cast<long>(center), -1}; }

inline std::size_t wrap(long i, std::size_t n) {
    const long nn = static_cast<long>(n);
    long r = i % nn;
    if (r < 0) r += nn;
    return static_cast<std::size_t>(r);
}

template <class Tap>
void apply(std::span<const cplx> x, std::span<const Tap> taps, Layout lay, std::span<cplx> out) {
    const std::size_t n = x.size();
    for (std::size_t k = 0; k < n; ++k) out[k] = cplx{};
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const Tap t = taps[i];
        if (t == Tap{}) continue;
        const std::size_t s = wrap(lay.shift(i), n);
        // out[k] += t * x[k - s]
        for (std::size_t k = 0; k < s; ++k) out[k] += t * x[k + n - s];
        for (std::size_t k = s; k < n; ++k) out[k] += t * x[k - s];
    }
}

template <class Tap>
void apply_accumulate(std::span<const cplx> x, std::span<const Tap> taps, Layout lay, std::span<cplx> out) {
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const Tap t = taps[i];
        if (t == Tap{}) continue;
        const std::size_t s = wrap(lay.shift(i), n);
        for (std::size_t k = 0; k < s; ++k) out[k] += t * x[k + n - s];
        for (std::size_t k = s; k < n; ++k) out[k] += t * x[k - s];
    }
}

/// Input gradient: gx[m] += sum_i conj(t[i]) * gy[m + shift(i)].
template <class Tap>
void adjoint_accumulate(std::span<const cplx> gy, std::span<const Tap> taps, Layout lay, std::span<cplx> gx) {
    const std::size_t n = gy.size();
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const cplx t = std::conj(cplx(taps[i]));
        if (t == cplx{}) continue;
        const std::size_t s = wrap(lay.shift(i), n);
        for (std::size_t m = 0; m + s < n; ++m) gx[m] += t * gy[m + s];
        for (std::size_t m = n - s; m < n; ++m) gx[m] += t * gy[m + s - n];
    }
}

/// Complex tap gradient: g[i] = sum_n conj(x[n - shift(i)]) * gy[n].
inline cplx tap_gradient(std::span<const cplx> x, std::span<const cplx> gy, long shift) {
    const std::size_t n = x.size();
    const std::size_t s = wrap(shift, n);
    cplx acc{};
    for (std::size_t k = 0; k < s; ++k) acc += std::conj(x[k + n - s]) * gy[k];
    for (std::size_t k = s; k < n; ++k) acc += std::conj(x[k - s]) * gy[k];
    return acc;
}

} // namespace ldbp::fir
