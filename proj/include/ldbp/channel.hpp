#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldbp/fft.hpp"
#include "ldbp/jones.hpp"
#include "ldbp/rng.hpp"
#include "ldbp/signal.hpp"
#include "ldbp/units.hpp"

namespace ldbp {

struct FiberParams {
    double alpha_db_per_km = 0.2;
    double beta2_ps2_per_km = -21.67;
    double gamma_per_w_km = 1.2;
    double tau_pmd_ps_per_sqrt_km = 0.2;
    double correlation_length_km = 0.1;
    double span_length_km = 100.0;
    int n_spans = 10;
    double noise_figure_db = 4.5;
    double center_wavelength_nm = 1550.0;

    void validate() const {
        if (!(span_length_km > 0.0 && correlation_length_km > 0.0))
            throw std::invalid_argument("FiberParams: lengths must be positive");
        if (n_spans < 1) throw std::invalid_argument("FiberParams: n_spans must be >= 1");
    }

    double alpha_neper() const { return db_per_km_to_neper(alpha_db_per_km); }
    double total_length_km() const { return span_length_km * n_spans; }
    double span_loss_db() const { return alpha_db_per_km * span_length_km; }

    /// K = total length / L_c; throws unless integral.
    std::size_t n_sections() const {
        validate();
        const double k = total_length_km() / correlation_length_km;
        const double r = std::round(k);
        if (r < 1.0 || std::abs(k - r) > 1e-9 * std::max(1.0, k))
            throw std::invalid_argument("FiberParams: total length is not an integer number of correlation lengths");
        return static_cast<std::size_t>(r);
    }

    /// Mean per-section DGD tau_bar = tau * sqrt(3 pi / 8 * L_c), in ps.
    double mean_section_dgd_ps() const {
        return tau_pmd_ps_per_sqrt_km * std::sqrt(3.0 * kPi / 8.0 * correlation_length_km);
    }
};

/// Per-section DGD (ps) and PSP rotation. An empty realization means no PMD.
struct PmdRealization {
    std::vector<double> taus;
    std::vector<Jones> rotations;

    std::size_t size() const { return taus.size(); }
    bool empty() const { return taus.empty(); }

    static PmdRealization identity(std::size_t k) {
        return {std::vector<double>(k, 0.0), std::vector<Jones>(k, Jones::Identity())};
    }

    void validate(double tol = 1e-12) const {
        if (taus.size() != rotations.size()) throw std::invalid_argument("PmdRealization: size mismatch");
        for (const auto& r : rotations)
            if (!is_su2(r, tol)) throw std::invalid_argument("PmdRealization: rotation not in SU(2)");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["taus"] = taus;
        auto rots = nlohmann::json::array();
        for (const auto& r : rotations) rots.push_back({r(0, 0).real(), r(0, 0).imag(), r(0, 1).real(), r(0, 1).imag()});
        j["rotations"] = rots;
        return j;
    }

    static PmdRealization from_json(const nlohmann::json& j) {
        PmdRealization p;
        p.taus = j.at("taus").get<std::vector<double>>();
        for (const auto& r : j.at("rotations")) {
            const auto v = r.get<std::vector<double>>();
            if (v.size() != 4) throw std::invalid_argument("PmdRealization: rotation entry needs 4 numbers");
            p.rotations.push_back(su2_pattern({v[0], v[1]}, {v[2], v[3]}));
        }
        p.validate(1e-9);
        return p;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write " + path);
        f << to_json().dump(1) << '\n';
    }

    static PmdRealization load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot read " + path);
        return from_json(nlohmann::json::parse(f));
    }
};

inline PmdRealization sample_pmd_realization(const FiberParams& fp, Rng& rng) {
    const std::size_t k = fp.n_sections();
    const double mean = fp.mean_section_dgd_ps();
    PmdRealization p;
    p.taus.reserve(k);
    p.rotations.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        p.taus.push_back(mean + mean / 5.0 * rng.normal());
        p.rotations.push_back(sample_su2(rng));
    }
    return p;
}

enum class StepOrdering { AsymmetricLinearFirst, Symmetric };

struct SsfmStep {
    double h_km = 0.0;
    StepOrdering ordering = StepOrdering::AsymmetricLinearFirst;
};

/// Steps of one span; the same list is reused for every span.
struct SsfmPlan {
    std::vector<SsfmStep> steps;
    int steps_per_span = 0;

    static SsfmPlan uniform(const FiberParams& fp, int stps, StepOrdering ord = StepOrdering::AsymmetricLinearFirst) {
        if (stps < 1) throw std::invalid_argument("SsfmPlan: steps per span must be positive");
        SsfmPlan p;
        p.steps_per_span = stps;
        p.steps.assign(static_cast<std::size_t>(stps), SsfmStep{fp.span_length_km / stps, ord});
        return p;
    }

    void validate(const FiberParams& fp) const {
        if (steps.empty() || static_cast<int>(steps.size()) != steps_per_span)
            throw std::invalid_argument("SsfmPlan: step count mismatch");
        double sum = 0.0;
        for (const auto& s : steps) {
            if (!(s.h_km > 0.0)) throw std::invalid_argument("SsfmPlan: step length must be positive");
            sum += s.h_km;
        }
        if (std::abs(sum - fp.span_length_km) > 1e-9) throw std::invalid_argument("SsfmPlan: steps do not sum to span length");
    }
};

enum class NoiseMode { Off, On };

// ---------------------------------------------------------------------------
// elementary operators

/// exp(j beta2 w^2 h / 2), with w in rad/s, beta2 in ps^2/km and h in km.
inline std::vector<cplx> cd_phase(std::span<const double> omega, double beta2_ps2_per_km, double h_km) {
    if (h_km < 0.0) throw std::invalid_argument("cd_phase: negative step");
    const double b = beta2_ps2_per_km * kPs2PerKm * h_km / 2.0;
    std::vector<cplx> out(omega.size());
    for (std::size_t k = 0; k < omega.size(); ++k) out[k] = std::polar(1.0, b * omega[k] * omega[k]);
    return out;
}

struct DgdPhase {
    std::vector<cplx> x; // exp(-j w tau / 2)
    std::vector<cplx> y; // exp(+j w tau / 2)
};

inline DgdPhase dgd_phase(std::span<const double> omega, double tau_ps) {
    DgdPhase d;
    d.x.resize(omega.size());
    d.y.resize(omega.size());
    const double half = tau_ps * kPs / 2.0;
    for (std::size_t k = 0; k < omega.size(); ++k) {
        d.x[k] = std::polar(1.0, -omega[k] * half);
        d.y[k] = std::conj(d.x[k]);
    }
    return d;
}

/// u exp(j (8/9) gamma h ||u||^2) per sample.
inline void kerr_inplace(DualPolSignal& sig, double gamma, double h) {
    const double g = kManakovFactor * gamma * h;
    if (g == 0.0) return;
    for (std::size_t i = 0; i < sig.size(); ++i) {
        const cplx r = unit_phasor(g * (std::norm(sig.x[i]) + std::norm(sig.y[i])));
        sig.x[i] *= r;
        sig.y[i] *= r;
    }
}

inline DualPolSignal kerr_step(DualPolSignal sig, double gamma, double h_eff) {
    if (h_eff < 0.0) throw std::invalid_argument("kerr_step: negative length");
    kerr_inplace(sig, gamma, h_eff);
    return sig;
}

inline DualPolSignal attenuate(DualPolSignal sig, double alpha_db_per_km, double h_km) {
    if (h_km < 0.0) throw std::invalid_argument("attenuate: negative length");
    const double s = std::exp(-db_per_km_to_neper(alpha_db_per_km) * h_km / 2.0);
    for (int p = 0; p < 2; ++p)
        for (auto& v : sig.pol(p)) v *= s;
    return sig;
}

inline void rotate_inplace(DualPolSignal& sig, const Jones& r) {
    for (std::size_t i = 0; i < sig.size(); ++i) {
        const cplx a = sig.x[i], b = sig.y[i];
        sig.x[i] = r(0, 0) * a + r(0, 1) * b;
        sig.y[i] = r(1, 0) * a + r(1, 1) * b;
    }
}

/// Per-sample, per-polarization ASE variance n_sp (G-1) h nu f_s.
inline double ase_variance(double gain_db, double noise_figure_db, double sample_rate, double wavelength_nm = 1550.0) {
    if (noise_figure_db == -std::numeric_limits<double>::infinity()) return 0.0;
    const double g = db_to_linear(gain_db);
    const double nsp = db_to_linear(noise_figure_db) / 2.0;
    const double nu = kSpeedOfLight / (wavelength_nm * 1e-9);
    return nsp * (g - 1.0) * kPlanck * nu * sample_rate;
}

/// Lumped amplifier. A noise figure of -inf gives a noiseless gain.
inline DualPolSignal edfa(DualPolSignal sig, double gain_db, double noise_figure_db, Rng& rng,
                          double wavelength_nm = 1550.0) {
    if (gain_db < 0.0) throw std::invalid_argument("edfa: gain must be >= 1");
    const double a = std::sqrt(db_to_linear(gain_db));
    const double var = ase_variance(gain_db, noise_figure_db, sig.sample_rate, wavelength_nm);
    for (int p = 0; p < 2; ++p)
        for (auto& v : sig.pol(p)) {
            v *= a;
            if (var > 0.0) v += rng.complex_normal(var);
        }
    return sig;
}

// ---------------------------------------------------------------------------
// frequency-domain helpers

inline DualPolSignal apply_frequency_response(const DualPolSignal& sig, std::span<const cplx> hx, std::span<const cplx> hy) {
    DualPolSignal out = sig;
    std::vector<cplx> scratch;
    fft::forward_inplace(out.x, scratch);
    fft::forward_inplace(out.y, scratch);
    for (std::size_t k = 0; k < out.size(); ++k) {
        out.x[k] *= hx[k];
        out.y[k] *= hy[k];
    }
    fft::inverse_inplace(out.x, scratch);
    fft::inverse_inplace(out.y, scratch);
    return out;
}

/// Chromatic dispersion over length_km (negative beta2 input undoes it).
inline DualPolSignal apply_cd(const DualPolSignal& sig, double beta2_ps2_per_km, double length_km) {
    const auto w = fft::omega_grid(sig.size(), sig.sample_rate);
    const auto h = cd_phase(w, beta2_ps2_per_km, length_km);
    return apply_frequency_response(sig, h, h);
}

/// J(w) = R^(K-1) J^(K-1)(w) ... R^(0) J^(0)(w), i.e. sections in propagation order.
inline std::vector<Jones> overall_jones(std::span<const double> omega, const PmdRealization& pmd) {
    std::vector<Jones> out(omega.size(), Jones::Identity());
    for (std::size_t k = 0; k < omega.size(); ++k) {
        Jones j = Jones::Identity();
        for (std::size_t s = 0; s < pmd.size(); ++s) {
            const double half = pmd.taus[s] * kPs / 2.0;
            const cplx ex = std::polar(1.0, -omega[k] * half);
            Jones d;
            d << ex, 0.0, 0.0, std::conj(ex);
            j = pmd.rotations[s] * d * j;
        }
        out[k] = j;
    }
    return out;
}

/// Per-bin 2x2 multiply in the frequency domain.
inline DualPolSignal apply_jones_response(const DualPolSignal& sig, std::span<const Jones> j, bool adjoint = false) {
    DualPolSignal out = sig;
    std::vector<cplx> scratch;
    fft::forward_inplace(out.x, scratch);
    fft::forward_inplace(out.y, scratch);
    for (std::size_t k = 0; k < out.size(); ++k) {
        const Jones m = adjoint ? Jones(j[k].adjoint()) : j[k];
        const cplx a = out.x[k], b = out.y[k];
        out.x[k] = m(0, 0) * a + m(0, 1) * b;
        out.y[k] = m(1, 0) * a + m(1, 1) * b;
    }
    fft::inverse_inplace(out.x, scratch);
    fft::inverse_inplace(out.y, scratch);
    return out;
}

/// MIMO filter with response J^-1(w) = J^H(w).
inline DualPolSignal ideal_pmd_inverse(const DualPolSignal& sig, const PmdRealization& pmd) {
    const auto w = fft::omega_grid(sig.size(), sig.sample_rate);
    return apply_jones_response(sig, overall_jones(w, pmd), true);
}

// ---------------------------------------------------------------------------
// split-step propagation

struct SsfmOptions {
    bool effective_length_kerr = false; // (1 - e^{-alpha h}) / alpha instead of h
};

/// Forward SSFM over all spans. Per step: attenuation, CD and the section's
/// DGD fraction in the frequency domain, the section's PSP rotation when the
/// step closes a section, then the Kerr phase. An amplifier restores the span
/// loss after every span.
inline DualPolSignal ssfm_propagate(DualPolSignal sig, const FiberParams& fp, const PmdRealization& pmd,
                                    const SsfmPlan& plan, NoiseMode noise, Rng rng, SsfmOptions opt = {}) {
    sig.validate();
    fp.validate();
    plan.validate(fp);
    const bool with_pmd = !pmd.empty();
    if (with_pmd && pmd.size() != fp.n_sections())
        throw std::invalid_argument("ssfm_propagate: realization does not match the number of PMD sections");

    const std::size_t n = sig.size();
    const auto omega = fft::omega_grid(n, sig.sample_rate);
    const double alpha = fp.alpha_neper();
    const double lc = fp.correlation_length_km;
    const double tol = 1e-9;

    // Linear responses without DGD, per step of the span plan; the inverse
    // DFT's 1/N is folded in.
    const double inv_n = 1.0 / static_cast<double>(n);
    auto response = [&](double h) {
        auto r = cd_phase(omega, fp.beta2_ps2_per_km, h);
        const double a = std::exp(-alpha * h / 2.0) * inv_n;
        for (auto& v : r) v *= a;
        return r;
    };
    // uniform plans repeat one step length, so build each distinct response once
    std::map<double, std::shared_ptr<const std::vector<cplx>>> by_length;
    std::vector<std::shared_ptr<const std::vector<cplx>>> lin(plan.steps.size());
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const double h = plan.steps[i].ordering == StepOrdering::Symmetric ? plan.steps[i].h_km / 2.0 : plan.steps[i].h_km;
        auto& r = by_length[h];
        if (!r) r = std::make_shared<const std::vector<cplx>>(response(h));
        lin[i] = r;
    }

    // exp(-j w_k dgd/2) on the uniform grid by recurrence, reseeded every 64 bins.
    std::vector<cplx> ex(n);
    const double dw = 2.0 * kPi * sig.sample_rate / static_cast<double>(n);
    auto fill_dgd = [&](double dgd_ps) {
        const double theta = -dw * dgd_ps * kPs / 2.0;
        const cplx r = std::polar(1.0, theta);
        const std::size_t pos = (n + 1) / 2; // bins 0 .. pos-1 are non-negative
        cplx e{1.0, 0.0};
        for (std::size_t k = 0; k < pos; ++k) {
            if (k % 64 == 0) e = std::polar(1.0, theta * static_cast<double>(k));
            ex[k] = e;
            e *= r;
        }
        for (std::size_t k = pos; k < n; ++k) {
            const double m = static_cast<double>(n - k);
            ex[k] = (n - k < pos) ? std::conj(ex[n - k]) : std::polar(1.0, -theta * m);
        }
    };

    std::vector<cplx> scratch;
    auto linear = [&](const std::vector<cplx>& base, double dgd_ps) {
        fft::forward_inplace(sig.x, scratch);
        fft::forward_inplace(sig.y, scratch);
        if (dgd_ps != 0.0) {
            fill_dgd(dgd_ps);
            for (std::size_t k = 0; k < n; ++k) {
                const cplx b = base[k];
                sig.x[k] *= b * ex[k];
                sig.y[k] *= b * std::conj(ex[k]);
            }
        } else {
            for (std::size_t k = 0; k < n; ++k) {
                sig.x[k] *= base[k];
                sig.y[k] *= base[k];
            }
        }
        fft::inverse_unscaled_inplace(sig.x, scratch);
        fft::inverse_unscaled_inplace(sig.y, scratch);
    };

    double z = 0.0;
    for (int span = 0; span < fp.n_spans; ++span) {
        for (std::size_t i = 0; i < plan.steps.size(); ++i) {
            const double h = plan.steps[i].h_km;
            const double z1 = z + h;
            std::size_t section = 0;
            bool closes_section = false;
            double dgd = 0.0;
            if (with_pmd) {
                section = static_cast<std::size_t>(std::floor(z / lc + tol));
                const double end = static_cast<double>(section + 1) * lc;
                if (z1 > end + tol * lc) throw std::invalid_argument("ssfm_propagate: step crosses a PMD section boundary");
                closes_section = std::abs(z1 - end) <= tol * lc;
                dgd = pmd.taus[section] * h / lc;
            }
            const double kerr_len = opt.effective_length_kerr && alpha > 0.0 ? (1.0 - std::exp(-alpha * h)) / alpha : h;

            if (plan.steps[i].ordering == StepOrdering::Symmetric) {
                linear(*lin[i], dgd / 2.0);
                kerr_inplace(sig, fp.gamma_per_w_km, kerr_len);
                linear(*lin[i], dgd / 2.0);
            } else {
                linear(*lin[i], dgd);
                kerr_inplace(sig, fp.gamma_per_w_km, kerr_len);
            }
            if (closes_section) rotate_inplace(sig, pmd.rotations[section]);
            z = z1;
        }
        sig = edfa(std::move(sig), fp.span_loss_db(),
                   noise == NoiseMode::On ? fp.noise_figure_db : -std::numeric_limits<double>::infinity(), rng,
                   fp.center_wavelength_nm);
    }
    return sig;
}

/// Conventional DBP without PMD: symmetric steps, uniform step size,
/// frequency-domain CD, signal kept at the launch-power normalization and the
/// Kerr phase weighted by the local power profile.
inline DualPolSignal digital_backpropagation(DualPolSignal sig, const FiberParams& fp, int steps_per_span) {
    if (steps_per_span < 1) throw std::invalid_argument("digital_backpropagation: steps per span must be positive");
    const auto omega = fft::omega_grid(sig.size(), sig.sample_rate);
    const double h = fp.span_length_km / steps_per_span;
    const double alpha = fp.alpha_neper();
    const auto half = cd_phase(omega, -fp.beta2_ps2_per_km, h / 2.0);
    for (int span = 0; span < fp.n_spans; ++span) {
        for (int i = steps_per_span - 1; i >= 0; --i) {
            const double z0 = i * h;
            const double w = alpha > 0.0 ? (std::exp(-alpha * z0) - std::exp(-alpha * (z0 + h))) / alpha : h;
            sig = apply_frequency_response(sig, half, half);
            kerr_inplace(sig, -fp.gamma_per_w_km, w);
            sig = apply_frequency_response(sig, half, half);
        }
    }
    return sig;
}

} // namespace ldbp
