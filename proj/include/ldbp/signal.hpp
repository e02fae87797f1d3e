#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldbp/fft.hpp"
#include "ldbp/rng.hpp"
#include "ldbp/units.hpp"

namespace ldbp {

/// Jones vector in discrete time: x/y polarization samples at a common rate.
/// Mean |.|^2 of a stream is its power in W.
struct DualPolSignal {
    std::vector<cplx> x;
    std::vector<cplx> y;
    double sample_rate = 0.0; // Hz

    DualPolSignal() = default;
    DualPolSignal(std::vector<cplx> xs, std::vector<cplx> ys, double fs)
        : x(std::move(xs)), y(std::move(ys)), sample_rate(fs) {
        validate();
    }

    static DualPolSignal zeros(std::size_t n, double fs) {
        return {std::vector<cplx>(n), std::vector<cplx>(n), fs};
    }

    std::size_t size() const { return x.size(); }

    void validate() const {
        if (x.empty() || x.size() != y.size())
            throw std::invalid_argument("DualPolSignal: polarizations must be non-empty and equal length");
        if (!(sample_rate > 0.0)) throw std::invalid_argument("DualPolSignal: sample_rate must be positive");
    }

    std::vector<cplx>& pol(int p) { return p == 0 ? x : y; }
    const std::vector<cplx>& pol(int p) const { return p == 0 ? x : y; }

    /// mean(|x|^2) + mean(|y|^2)
    double power() const {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += std::norm(x[i]) + std::norm(y[i]);
        return s / static_cast<double>(x.size());
    }

    double energy() const {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += std::norm(x[i]) + std::norm(y[i]);
        return s;
    }
};

struct SymbolSequence {
    std::vector<cplx> sx;
    std::vector<cplx> sy;
    double symbol_rate = 0.0; // baud

    SymbolSequence() = default;
    SymbolSequence(std::vector<cplx> a, std::vector<cplx> b, double rate)
        : sx(std::move(a)), sy(std::move(b)), symbol_rate(rate) {
        validate();
    }

    std::size_t size() const { return sx.size(); }

    void validate() const {
        if (sx.empty() || sx.size() != sy.size())
            throw std::invalid_argument("SymbolSequence: polarizations must be non-empty and equal length");
    }

    std::vector<cplx>& pol(int p) { return p == 0 ? sx : sy; }
    const std::vector<cplx>& pol(int p) const { return p == 0 ? sx : sy; }
};

/// Root-raised-cosine pulse. span_symbols == 0 selects the exact periodic
/// response of the whole circular block; a positive span truncates the
/// time-domain taps to that many symbols.
struct PulseShape {
    double rolloff = 0.01;
    int span_symbols = 0;
    int samples_per_symbol = 6;

    void validate() const {
        if (!(rolloff > 0.0 && rolloff <= 1.0)) throw std::invalid_argument("PulseShape: rolloff must be in (0,1]");
        if (span_symbols < 0) throw std::invalid_argument("PulseShape: negative span");
        if (samples_per_symbol < 1) throw std::invalid_argument("PulseShape: samples_per_symbol must be positive");
    }
};

// ---------------------------------------------------------------------------
// symbols

inline SymbolSequence generate_symbols(std::size_t n_sym, double power_dbm, Rng& rng, double symbol_rate = 32e9) {
    if (n_sym == 0) throw std::invalid_argument("generate_symbols: n_sym must be positive");
    const double per_pol = dbm_to_watt(power_dbm) / 2.0;
    std::vector<cplx> a(n_sym), b(n_sym);
    for (std::size_t i = 0; i < n_sym; ++i) a[i] = rng.complex_normal(per_pol);
    for (std::size_t i = 0; i < n_sym; ++i) b[i] = rng.complex_normal(per_pol);
    return {std::move(a), std::move(b), symbol_rate};
}

// ---------------------------------------------------------------------------
// pulse shaping

namespace detail {

/// Continuous RRC impulse response, t in symbol periods, peak-normalized form.
inline double rrc_time(double t, double beta) {
    if (std::abs(t) < 1e-12) return 1.0 - beta + 4.0 * beta / kPi;
    if (std::abs(std::abs(4.0 * beta * t) - 1.0) < 1e-9) {
        return beta / std::sqrt(2.0) *
               ((1.0 + 2.0 / kPi) * std::sin(kPi / (4.0 * beta)) + (1.0 - 2.0 / kPi) * std::cos(kPi / (4.0 * beta)));
    }
    const double num = std::sin(kPi * t * (1.0 - beta)) + 4.0 * beta * t * std::cos(kPi * t * (1.0 + beta));
    const double den = kPi * t * (1.0 - 16.0 * beta * beta * t * t);
    return num / den;
}

/// Raised-cosine spectrum, f in units of the symbol rate, unit gain at DC.
inline double raised_cosine_spectrum(double f, double beta) {
    const double af = std::abs(f);
    const double lo = (1.0 - beta) / 2.0;
    const double hi = (1.0 + beta) / 2.0;
    if (af <= lo) return 1.0;
    if (af > hi) return 0.0;
    return 0.5 * (1.0 + std::cos(kPi / beta * (af - lo)));
}

inline void require_multiple(std::size_t n, std::size_t m, const char* what) {
    if (m == 0 || n % m != 0) throw std::invalid_argument(what);
}

} // namespace detail

/// Frequency response of the unit-energy RRC filter on an n-point circular grid.
inline std::vector<cplx> rrc_response(const PulseShape& shape, std::size_t n) {
    shape.validate();
    const auto sps = static_cast<double>(shape.samples_per_symbol);
    std::vector<cplx> h(n);
    if (shape.span_symbols == 0) {
        for (std::size_t k = 0; k < n; ++k) {
            const double f = fft::bin_frequency(k, n, sps); // in symbol-rate units
            h[k] = std::sqrt(sps * detail::raised_cosine_spectrum(f, shape.rolloff));
        }
        return h;
    }
    const int half = shape.span_symbols * shape.samples_per_symbol / 2;
    std::vector<double> taps(static_cast<std::size_t>(2 * half + 1));
    for (int i = -half; i <= half; ++i) taps[static_cast<std::size_t>(i + half)] = detail::rrc_time(i / sps, shape.rolloff);
    const double e = std::sqrt(std::inner_product(taps.begin(), taps.end(), taps.begin(), 0.0));
    std::vector<cplx> circ(n);
    for (int i = -half; i <= half; ++i) {
        const auto idx = static_cast<std::size_t>(((i % static_cast<long>(n)) + static_cast<long>(n)) % static_cast<long>(n));
        circ[idx] += taps[static_cast<std::size_t>(i + half)] / e;
    }
    return fft::forward(circ);
}

/// Circular impulse response of the RRC filter (real, symmetric, unit energy).
inline std::vector<double> rrc_taps(const PulseShape& shape, std::size_t n) {
    const auto t = fft::inverse(rrc_response(shape, n));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = t[i].real();
    return out;
}

/// Multiply the DFT of x by a response of equal length.
inline std::vector<cplx> filter_frequency(std::span<const cplx> x, std::span<const cplx> response) {
    auto X = fft::forward(x);
    for (std::size_t k = 0; k < X.size(); ++k) X[k] *= response[k];
    return fft::inverse(X);
}

/// Upsample by zero insertion, filter with the RRC, scale by sqrt(sps) so that
/// the waveform power equals the symbol power.
inline DualPolSignal rrc_shape(const SymbolSequence& sym, const PulseShape& shape) {
    sym.validate();
    shape.validate();
    if (shape.samples_per_symbol < 2) throw std::invalid_argument("rrc_shape: need at least 2 samples/symbol");
    const auto sps = static_cast<std::size_t>(shape.samples_per_symbol);
    const std::size_t n = sym.size() * sps;
    auto h = rrc_response(shape, n);
    const double g = std::sqrt(static_cast<double>(sps));
    for (auto& v : h) v *= g;
    DualPolSignal out = DualPolSignal::zeros(n, sym.symbol_rate * static_cast<double>(sps));
    for (int p = 0; p < 2; ++p) {
        std::vector<cplx> up(n);
        for (std::size_t i = 0; i < sym.size(); ++i) up[i * sps] = sym.pol(p)[i];
        out.pol(p) = filter_frequency(up, h);
    }
    return out;
}

/// Matched RRC filter followed by sampling at the symbol instants.
inline SymbolSequence matched_filter_downsample(const DualPolSignal& sig, const PulseShape& shape) {
    sig.validate();
    shape.validate();
    const auto sps = static_cast<std::size_t>(shape.samples_per_symbol);
    detail::require_multiple(sig.size(), sps, "matched_filter_downsample: length not a multiple of samples/symbol");
    auto h = rrc_response(shape, sig.size());
    const double g = 1.0 / std::sqrt(static_cast<double>(sps));
    for (auto& v : h) v = std::conj(v) * g;
    const std::size_t n_sym = sig.size() / sps;
    SymbolSequence out;
    out.symbol_rate = sig.sample_rate / static_cast<double>(sps);
    for (int p = 0; p < 2; ++p) {
        const auto f = filter_frequency(sig.pol(p), h);
        auto& dst = out.pol(p);
        dst.resize(n_sym);
        for (std::size_t i = 0; i < n_sym; ++i) dst[i] = f[i * sps];
    }
    return out;
}

/// Adjoint of matched_filter_downsample, mapping symbol-domain gradients
/// (d/dRe + j d/dIm convention) back to the n-sample signal domain.
inline DualPolSignal matched_filter_adjoint(const SymbolSequence& grad, const PulseShape& shape, double sample_rate) {
    const auto sps = static_cast<std::size_t>(shape.samples_per_symbol);
    const std::size_t n = grad.size() * sps;
    auto h = rrc_response(shape, n); // conj(conj(H)) == H
    const double g = 1.0 / std::sqrt(static_cast<double>(sps));
    for (auto& v : h) v *= g;
    DualPolSignal out = DualPolSignal::zeros(n, sample_rate);
    for (int p = 0; p < 2; ++p) {
        std::vector<cplx> up(n);
        for (std::size_t i = 0; i < grad.size(); ++i) up[i * sps] = grad.pol(p)[i];
        out.pol(p) = filter_frequency(up, h);
    }
    return out;
}

/// Ideal brick-wall low-pass (bins with |f| <= bw/2 kept) followed by
/// decimation by an integer factor. Bins at exactly +-fs_out/2 share the output
/// Nyquist bin with half weight each.
inline DualPolSignal lowpass_downsample(const DualPolSignal& sig, double target_bw, std::size_t decimation) {
    sig.validate();
    if (decimation == 0) throw std::invalid_argument("lowpass_downsample: zero decimation");
    detail::require_multiple(sig.size(), decimation, "lowpass_downsample: length not divisible by decimation factor");
    const double fs_out = sig.sample_rate / static_cast<double>(decimation);
    if (target_bw > fs_out * (1.0 + 1e-12))
        throw std::invalid_argument("lowpass_downsample: target bandwidth exceeds output sample rate");
    const std::size_t n = sig.size();
    const std::size_t m = n / decimation;
    const double edge = target_bw / 2.0;
    const double tol = 1e-9 * sig.sample_rate / static_cast<double>(n);
    DualPolSignal out = DualPolSignal::zeros(m, fs_out);
    for (int p = 0; p < 2; ++p) {
        const auto X = fft::forward(sig.pol(p));
        std::vector<cplx> Y(m);
        const double scale = static_cast<double>(m) / static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double f = fft::bin_frequency(k, n, sig.sample_rate);
            if (std::abs(f) > edge + tol) continue;
            // +fs_out/2 and -fs_out/2 fold onto the same output bin
            const bool folds = m < n && std::abs(std::abs(f) - fs_out / 2.0) <= tol;
            const double w = folds ? 0.5 : 1.0;
            const double fo = f / fs_out * static_cast<double>(m);
            const auto bin = static_cast<long long>(std::llround(fo));
            const auto idx = static_cast<std::size_t>(((bin % static_cast<long long>(m)) + static_cast<long long>(m)) %
                                                      static_cast<long long>(m));
            Y[idx] += w * scale * X[k];
        }
        out.pol(p) = fft::inverse(Y);
    }
    return out;
}

// ---------------------------------------------------------------------------
// receiver metrics

/// arg(s^H s~) over both polarizations.
inline double genie_phase(const SymbolSequence& tilde_s, const SymbolSequence& ref_s) {
    if (tilde_s.size() != ref_s.size()) throw std::invalid_argument("genie_phase: length mismatch");
    cplx z{};
    double ref_norm = 0.0;
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < ref_s.size(); ++i) {
            z += std::conj(ref_s.pol(p)[i]) * tilde_s.pol(p)[i];
            ref_norm += std::norm(ref_s.pol(p)[i]);
        }
    if (ref_norm == 0.0) throw std::invalid_argument("genie_phase: all-zero reference");
    return std::arg(z);
}

inline SymbolSequence genie_phase_correct(const SymbolSequence& tilde_s, const SymbolSequence& ref_s) {
    const double phi = genie_phase(tilde_s, ref_s);
    const cplx rot = std::polar(1.0, -phi);
    SymbolSequence out = tilde_s;
    for (int p = 0; p < 2; ++p)
        for (auto& v : out.pol(p)) v *= rot;
    return out;
}

/// ||s^||^2 / ||s^ - s||^2. An exact match is reported through `infinite`
/// rather than a floating-point infinity.
struct EffectiveSnr {
    double ratio = 0.0;
    bool infinite = false;

    static EffectiveSnr make_infinite() { return {0.0, true}; }

    double db() const {
        if (infinite) throw std::domain_error("EffectiveSnr: infinite SNR has no dB value");
        return linear_to_db(ratio);
    }
};

namespace detail {
inline void norms(const SymbolSequence& hat_s, const SymbolSequence& ref_s, double& sig, double& err) {
    if (hat_s.size() != ref_s.size()) throw std::invalid_argument("effective_snr: length mismatch");
    sig = 0.0;
    err = 0.0;
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < ref_s.size(); ++i) {
            sig += std::norm(hat_s.pol(p)[i]);
            err += std::norm(hat_s.pol(p)[i] - ref_s.pol(p)[i]);
        }
}
} // namespace detail

inline EffectiveSnr effective_snr(const SymbolSequence& hat_s, const SymbolSequence& ref_s) {
    double sig = 0.0, err = 0.0;
    detail::norms(hat_s, ref_s, sig, err);
    if (err == 0.0) return EffectiveSnr::make_infinite();
    return {sig / err, false};
}

/// Effective SNR pooled over several sequences (sum of numerators over sum of denominators).
inline EffectiveSnr pooled_effective_snr(std::span<const SymbolSequence> hat, std::span<const SymbolSequence> ref) {
    double sig = 0.0, err = 0.0;
    for (std::size_t i = 0; i < hat.size(); ++i) {
        double a = 0.0, b = 0.0;
        detail::norms(hat[i], ref[i], a, b);
        sig += a;
        err += b;
    }
    if (err == 0.0) return EffectiveSnr::make_infinite();
    return {sig / err, false};
}

} // namespace ldbp
