#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldbp/channel.hpp"
#include "ldbp/fir.hpp"
#include "ldbp/jones.hpp"
#include "ldbp/lagrange.hpp"
#include "ldbp/rng.hpp"
#include "ldbp/signal.hpp"

namespace ldbp {

enum class Parameterization { FreeMimo, FreeDgdFreeMatrix, FreeDgdSu2Star, LagrangeFreeMatrix, LagrangeSu2Star };

inline constexpr std::array<Parameterization, 5> kAllParameterizations = {
    Parameterization::FreeMimo, Parameterization::FreeDgdFreeMatrix, Parameterization::FreeDgdSu2Star,
    Parameterization::LagrangeFreeMatrix, Parameterization::LagrangeSu2Star};

inline std::string to_string(Parameterization p) {
    switch (p) {
    case Parameterization::FreeMimo: return "free_mimo";
    case Parameterization::FreeDgdFreeMatrix: return "free_dgd_free_matrix";
    case Parameterization::FreeDgdSu2Star: return "free_dgd_su2star";
    case Parameterization::LagrangeFreeMatrix: return "lagrange_free_matrix";
    case Parameterization::LagrangeSu2Star: return "lagrange_su2star";
    }
    return "?";
}

inline Parameterization parse_parameterization(const std::string& s) {
    for (auto p : kAllParameterizations)
        if (to_string(p) == s) return p;
    throw std::invalid_argument("unknown parameterization: " + s);
}

inline bool is_mimo(Parameterization p) { return p == Parameterization::FreeMimo; }
inline bool uses_lagrange(Parameterization p) {
    return p == Parameterization::LagrangeFreeMatrix || p == Parameterization::LagrangeSu2Star;
}
inline bool uses_su2star(Parameterization p) {
    return p == Parameterization::FreeDgdSu2Star || p == Parameterization::LagrangeSu2Star;
}

enum class RotationInit { Identity, RandomSu2 };

inline std::string to_string(RotationInit r) { return r == RotationInit::Identity ? "identity" : "random_su2"; }
inline RotationInit parse_rotation_init(const std::string& s) {
    if (s == "identity") return RotationInit::Identity;
    if (s == "random_su2") return RotationInit::RandomSu2;
    throw std::invalid_argument("unknown rotation init: " + s);
}

// ---------------------------------------------------------------------------
// step plan

enum class StepSchedule { Uniform, ModLogarithmic };

/// One model step: CD undone by the linear part, Kerr weight of the activation
/// that follows it, and filter lengths.
struct ModelStep {
    double cd_length_km = 0.0;
    double kerr_length_km = 0.0; // integral of the normalized power profile over the segment
    bool activation = true;
    std::size_t cd_taps = 1;     // F'_k, odd
};

struct StepPlan {
    std::vector<ModelStep> steps;
    std::size_t dgd_length = 5; // F
    double sample_rate = 64e9;
};

/// Segment lengths of one span in propagation order. The modified logarithmic
/// rule h_n = -ln((1 - n d) / (1 - (n-1) d)) / (2 a s), d = (1 - e^{-2 a L s}) / N
/// equalizes the nonlinear phase per segment; s = 1 is the plain logarithmic rule.
inline std::vector<double> span_segments(const FiberParams& fp, int stps, StepSchedule sched, double adjust = 1.0) {
    if (stps < 1) throw std::invalid_argument("span_segments: steps per span must be positive");
    const double l = fp.span_length_km;
    std::vector<double> h(static_cast<std::size_t>(stps), l / stps);
    const double a = fp.alpha_neper();
    if (sched == StepSchedule::Uniform || a == 0.0 || stps == 1) return h;
    if (!(adjust > 0.0)) throw std::invalid_argument("span_segments: adjustment factor must be positive");
    const double s = adjust;
    const double d = (1.0 - std::exp(-2.0 * a * l * s)) / stps;
    double acc = 0.0;
    for (int n = 1; n <= stps; ++n) {
        h[static_cast<std::size_t>(n - 1)] = -std::log((1.0 - n * d) / (1.0 - (n - 1) * d)) / (2.0 * a * s);
        acc += h[static_cast<std::size_t>(n - 1)];
    }
    // absorb rounding so the span closes exactly
    h.back() += l - acc;
    return h;
}

/// Backward-direction plan: n_spans * stps activations and n_spans * stps + 1
/// linear steps, the first and last being half steps.
inline StepPlan make_step_plan(const FiberParams& fp, int stps, StepSchedule sched, double sample_rate,
                               double average_cd_taps = 25.0, std::size_t dgd_length = 5, double adjust = 1.0) {
    const auto seg = span_segments(fp, stps, sched, adjust);
    const double a = fp.alpha_neper();
    // segments in backward order: last span first, each span end-to-start
    struct Seg {
        double len, weight;
    };
    std::vector<Seg> back;
    for (int s = 0; s < fp.n_spans; ++s) {
        double z_end = fp.span_length_km;
        for (int i = stps - 1; i >= 0; --i) {
            const double len = seg[static_cast<std::size_t>(i)];
            const double z0 = z_end - len;
            const double w = a > 0.0 ? (std::exp(-a * z0) - std::exp(-a * z_end)) / a : len;
            back.push_back({len, w});
            z_end = z0;
        }
    }
    StepPlan plan;
    plan.dgd_length = dgd_length;
    plan.sample_rate = sample_rate;
    const std::size_t ns = back.size();
    double total = 0.0;
    for (std::size_t j = 0; j <= ns; ++j) {
        ModelStep st;
        const double prev = j > 0 ? back[j - 1].len : 0.0;
        const double cur = j < ns ? back[j].len : 0.0;
        st.cd_length_km = (prev + cur) / 2.0;
        st.activation = j < ns;
        st.kerr_length_km = j < ns ? back[j].weight : 0.0;
        total += st.cd_length_km;
        plan.steps.push_back(st);
    }
    const double rate = (average_cd_taps - 1.0) * static_cast<double>(plan.steps.size()) / (2.0 * total);
    for (auto& st : plan.steps) {
        const long half = std::lround(rate * st.cd_length_km);
        st.cd_taps = static_cast<std::size_t>(2 * std::max(0L, half) + 1);
    }
    return plan;
}

// ---------------------------------------------------------------------------
// parameters

struct TrainableGroups {
    bool cd = false;
    bool dgd = false;
    bool rotation = false;
    bool mimo = false;
};

/// 2x2 MIMO FIR; taps[2*a + b] maps input pol b to output pol a, centered on length/2.
struct MimoTaps {
    std::array<std::vector<cplx>, 4> taps;

    std::size_t length() const { return taps[0].size(); }

    static MimoTaps delta(std::size_t length, const Jones& r) {
        MimoTaps m;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                auto& t = m.taps[static_cast<std::size_t>(2 * a + b)];
                t.assign(length, cplx{});
                t[length / 2] = r(a, b);
            }
        return m;
    }
};

struct LdbpStep {
    double cd_length_km = 0.0;
    double gamma = 0.0;          // signed nonlinear coefficient of the activation (rad/W/km)
    double kerr_length_km = 0.0;
    bool activation = true;

    std::vector<cplx> cd_half;   // c_0 .. c_M of the symmetric CD filter (length 2M+1)
    std::vector<double> dgd_taps; // free DGD filter d_0 .. d_{F-1}
    double tau_ps = 0.0;          // Lagrange DGD
    Jones matrix = Jones::Identity(); // free rotation matrix
    cplx su2_a{1.0, 0.0};
    cplx su2_b{0.0, 0.0};
    MimoTaps mimo;

    TrainableGroups trainable;

    std::size_t cd_length() const { return cd_half.empty() ? 0 : 2 * cd_half.size() - 1; }

    /// [c_M .. c_0 .. c_M]
    std::vector<cplx> cd_taps() const {
        const std::size_t m = cd_half.size() - 1;
        std::vector<cplx> t(2 * m + 1);
        for (std::size_t i = 0; i <= m; ++i) {
            t[m + i] = cd_half[i];
            t[m - i] = cd_half[i];
        }
        return t;
    }
};

/// Expand a step's rotation for the given parameterization.
inline Jones step_rotation(const LdbpStep& s, Parameterization p) {
    return uses_su2star(p) ? su2_pattern(s.su2_a, s.su2_b) : s.matrix;
}

struct LdbpModel {
    Parameterization parameterization = Parameterization::FreeDgdSu2Star;
    std::size_t dgd_length = 5;
    double sample_rate = 64e9;
    std::vector<LdbpStep> steps;
    std::optional<MimoTaps> trailing; // lumped MIMO appended after the last step
    bool trailing_trainable = false;
    std::vector<std::uint64_t> seed_lineage;

    /// DGD taps of a step: free taps or Lagrange taps derived from tau.
    std::vector<double> dgd_taps(const LdbpStep& s) const {
        if (uses_lagrange(parameterization)) return lagrange_taps(s.tau_ps, dgd_length, sample_rate);
        return s.dgd_taps;
    }

    void set_trainable(TrainableGroups g) {
        for (auto& s : steps) s.trainable = g;
    }
};

/// Stage-2 trainable set for a parameterization (CD taps frozen).
inline TrainableGroups pmd_groups(Parameterization p) {
    if (is_mimo(p)) return {false, false, false, true};
    return {false, true, true, false};
}

inline TrainableGroups cd_only_groups() { return {true, false, false, false}; }

// ---------------------------------------------------------------------------
// CD tap design

/// Weighted least-squares symmetric FIR approximating exp(-j beta2 w^2 h / 2).
/// Frequencies |f| <= band_fraction * fs / 2 have weight 1, the rest of the
/// band has weight out_of_band_weight (keeps the out-of-band gain bounded).
inline std::vector<cplx> design_inverse_cd_taps(std::size_t taps, double beta2_ps2_per_km, double h_km, double sample_rate,
                                                double band_fraction = 0.6, double out_of_band_weight = 0.1) {
    if (taps < 1) throw std::invalid_argument("design_inverse_cd_taps: length must be >= 1");
    if (taps % 2 == 0) throw std::invalid_argument("design_inverse_cd_taps: length must be odd");
    if (!(band_fraction > 0.0 && band_fraction <= 1.0)) throw std::invalid_argument("design_inverse_cd_taps: band fraction outside (0, 1]");
    const std::size_t m = (taps - 1) / 2;
    std::vector<cplx> half(m + 1);
    if (h_km == 0.0) {
        half[0] = 1.0;
        return half;
    }
    const std::size_t grid = std::max<std::size_t>(1024, 32 * (m + 1));
    Eigen::MatrixXd a(grid, m + 1);
    Eigen::VectorXd br(grid), bi(grid);
    const double b2 = beta2_ps2_per_km * kPs2PerKm;
    for (std::size_t g = 0; g < grid; ++g) {
        // the response is even in f, so [0, fs/2] suffices
        const double frac = (static_cast<double>(g) + 0.5) / static_cast<double>(grid);
        const double wgt = frac <= band_fraction ? 1.0 : out_of_band_weight;
        const double w = 2.0 * kPi * frac * sample_rate / 2.0;
        const double wt = w / sample_rate;
        const auto r = static_cast<Eigen::Index>(g);
        a(r, 0) = wgt;
        for (std::size_t n = 1; n <= m; ++n) a(r, static_cast<Eigen::Index>(n)) = wgt * 2.0 * std::cos(static_cast<double>(n) * wt);
        const cplx target = std::polar(wgt, -b2 * w * w * h_km / 2.0);
        br(r) = target.real();
        bi(r) = target.imag();
    }
    const auto qr = a.colPivHouseholderQr();
    const Eigen::VectorXd xr = qr.solve(br);
    const Eigen::VectorXd xi = qr.solve(bi);
    for (std::size_t n = 0; n <= m; ++n) half[n] = {xr(static_cast<Eigen::Index>(n)), xi(static_cast<Eigen::Index>(n))};
    return half;
}

/// DTFT of a centered symmetric filter at angular frequency w (rad/s).
inline cplx symmetric_response(std::span<const cplx> half, double w, double sample_rate) {
    cplx h = half[0];
    for (std::size_t n = 1; n < half.size(); ++n) h += 2.0 * half[n] * std::cos(static_cast<double>(n) * w / sample_rate);
    return h;
}

// ---------------------------------------------------------------------------
// initialization

inline LdbpModel init_model(const StepPlan& plan, const FiberParams& fp, Parameterization param, RotationInit rot, Rng& rng,
                            double cd_band_fraction = 0.6) {
    LdbpModel m;
    m.parameterization = param;
    m.dgd_length = plan.dgd_length;
    m.sample_rate = plan.sample_rate;
    m.seed_lineage.push_back(rng.seed());
    const std::size_t f = plan.dgd_length;
    for (const auto& ps : plan.steps) {
        LdbpStep s;
        s.cd_length_km = ps.cd_length_km;
        s.activation = ps.activation;
        s.gamma = -fp.gamma_per_w_km;
        s.kerr_length_km = ps.kerr_length_km;
        s.cd_half = design_inverse_cd_taps(ps.cd_taps, fp.beta2_ps2_per_km, ps.cd_length_km, plan.sample_rate, cd_band_fraction);
        s.dgd_taps.assign(f, 0.0);
        s.dgd_taps[dgd_center(f)] = 1.0;
        s.tau_ps = 0.0;
        const Jones r = rot == RotationInit::RandomSu2 ? sample_su2(rng) : Jones::Identity();
        s.matrix = r;
        s.su2_a = r(0, 0);
        s.su2_b = r(0, 1);
        if (is_mimo(param)) s.mimo = MimoTaps::delta(f, r);
        s.trainable = pmd_groups(param);
        m.steps.push_back(std::move(s));
    }
    return m;
}

/// Re-parameterize a (pretrained) model: CD taps kept, PMD parts reset per scheme.
inline LdbpModel reparameterize(const LdbpModel& base, Parameterization param, RotationInit rot, Rng& rng,
                                std::size_t dgd_length = 0) {
    LdbpModel m = base;
    m.parameterization = param;
    if (dgd_length != 0) m.dgd_length = dgd_length;
    m.trailing.reset();
    m.trailing_trainable = false;
    m.seed_lineage.push_back(rng.seed());
    const std::size_t f = m.dgd_length;
    for (auto& s : m.steps) {
        s.dgd_taps.assign(f, 0.0);
        s.dgd_taps[dgd_center(f)] = 1.0;
        s.tau_ps = 0.0;
        const Jones r = rot == RotationInit::RandomSu2 ? sample_su2(rng) : Jones::Identity();
        s.matrix = r;
        s.su2_a = r(0, 0);
        s.su2_b = r(0, 1);
        s.mimo = is_mimo(param) ? MimoTaps::delta(f, r) : MimoTaps{};
        s.trainable = pmd_groups(param);
    }
    return m;
}

// ---------------------------------------------------------------------------
// operators

inline DualPolSignal apply_cd_taps(const DualPolSignal& sig, std::span<const cplx> half) {
    const auto m = half.size() - 1;
    std::vector<cplx> full(2 * m + 1);
    for (std::size_t i = 0; i <= m; ++i) full[m + i] = full[m - i] = half[i];
    DualPolSignal out = DualPolSignal::zeros(sig.size(), sig.sample_rate);
    for (int p = 0; p < 2; ++p)
        fir::apply<cplx>(sig.pol(p), full, fir::centered(m), out.pol(p));
    return out;
}

/// x convolved with d, y with the flipped d; tap F/2 is the zero-delay reference.
inline DualPolSignal apply_dgd_pair(const DualPolSignal& sig, std::span<const double> d) {
    const std::size_t c = dgd_center(d.size());
    DualPolSignal out = DualPolSignal::zeros(sig.size(), sig.sample_rate);
    fir::apply<double>(sig.x, d, fir::centered(c), out.x);
    fir::apply<double>(sig.y, d, fir::mirrored(c), out.y);
    return out;
}

inline DualPolSignal apply_rotation(DualPolSignal sig, const Jones& r) {
    rotate_inplace(sig, r);
    return sig;
}

inline DualPolSignal kerr_activation(DualPolSignal sig, double gamma, double h) {
    kerr_inplace(sig, gamma, h);
    return sig;
}

inline DualPolSignal apply_mimo(const DualPolSignal& sig, const MimoTaps& m) {
    const std::size_t c = m.length() / 2;
    DualPolSignal out = DualPolSignal::zeros(sig.size(), sig.sample_rate);
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            fir::apply_accumulate<cplx>(sig.pol(b), m.taps[static_cast<std::size_t>(2 * a + b)], fir::centered(c), out.pol(a));
    return out;
}

/// Intermediate signals of one step, kept for the reverse pass.
struct StepTrace {
    DualPolSignal input;     // before CD filter
    DualPolSignal after_cd;
    DualPolSignal after_dgd; // after DGD pair or MIMO filter
    DualPolSignal after_rot; // activation input
};

struct ForwardTrace {
    std::vector<StepTrace> steps;
    DualPolSignal before_trailing;
    DualPolSignal output;
};

/// w = f(v; theta). With a trace, intermediate signals are recorded.
inline DualPolSignal forward(const LdbpModel& model, const DualPolSignal& v, ForwardTrace* trace = nullptr) {
    v.validate();
    DualPolSignal u = v;
    if (trace) trace->steps.clear();
    for (const auto& s : model.steps) {
        StepTrace t;
        DualPolSignal a = apply_cd_taps(u, s.cd_half);
        DualPolSignal b;
        DualPolSignal c;
        if (is_mimo(model.parameterization)) {
            b = apply_mimo(a, s.mimo);
            c = b;
        } else {
            const auto d = model.dgd_taps(s);
            b = apply_dgd_pair(a, d);
            c = apply_rotation(b, step_rotation(s, model.parameterization));
        }
        DualPolSignal next = c;
        if (s.activation) kerr_inplace(next, s.gamma, s.kerr_length_km);
        if (trace) {
            t.input = std::move(u);
            t.after_cd = std::move(a);
            t.after_dgd = std::move(b);
            t.after_rot = std::move(c);
            trace->steps.push_back(std::move(t));
        }
        u = std::move(next);
    }
    if (model.trailing) {
        if (trace) trace->before_trailing = u;
        u = apply_mimo(u, *model.trailing);
    }
    if (trace) trace->output = u;
    return u;
}

// ---------------------------------------------------------------------------
// complexity

struct Complexity {
    std::size_t dof_per_step = 0;
    std::size_t rm_per_step = 0;
    std::size_t dof_total = 0;
    std::size_t total_memory = 0; // F_tot = sum(F'_k + F_k) - 2K
};

/// Degrees of freedom and real multiplications per step for a filter length F (CD taps excluded).
inline Complexity step_complexity(Parameterization p, std::size_t f) {
    Complexity c;
    if (is_mimo(p)) {
        c.dof_per_step = 8 * f;
        c.rm_per_step = 16 * f;
        return c;
    }
    const std::size_t dgd_dof = uses_lagrange(p) ? 1 : f;
    const std::size_t rot_dof = uses_su2star(p) ? 4 : 8;
    c.dof_per_step = dgd_dof + rot_dof;
    c.rm_per_step = 4 * f + 16;
    return c;
}

inline std::size_t total_memory(std::span<const std::size_t> cd_lengths, std::span<const std::size_t> dgd_lengths) {
    std::size_t s = 0;
    for (auto v : cd_lengths) s += v;
    for (auto v : dgd_lengths) s += v;
    return s - 2 * cd_lengths.size();
}

inline Complexity complexity(const LdbpModel& m) {
    Complexity c = step_complexity(m.parameterization, m.dgd_length);
    c.dof_total = c.dof_per_step * m.steps.size();
    std::vector<std::size_t> cd, dg;
    for (const auto& s : m.steps) {
        cd.push_back(s.cd_length());
        dg.push_back(is_mimo(m.parameterization) ? s.mimo.length() : m.dgd_length);
    }
    c.total_memory = total_memory(cd, dg);
    return c;
}

// ---------------------------------------------------------------------------
// parameter enumeration

/// Visit every parameter scalar of the active parameterization in a fixed
/// order as fn(double& value, bool trainable). Works on models used as
/// gradient accumulators as well.
template <class Model, class Fn>
void for_each_parameter(Model& m, Fn&& fn) {
    auto cplx_ref = [&](auto& z, bool tr) {
        auto* p = reinterpret_cast<std::conditional_t<std::is_const_v<Model>, const double*, double*>>(&z);
        fn(p[0], tr);
        fn(p[1], tr);
    };
    const auto param = m.parameterization;
    for (auto& s : m.steps) {
        for (auto& c : s.cd_half) cplx_ref(c, s.trainable.cd);
        if (is_mimo(param)) {
            for (auto& t : s.mimo.taps)
                for (auto& c : t) cplx_ref(c, s.trainable.mimo);
            continue;
        }
        if (uses_lagrange(param)) fn(s.tau_ps, s.trainable.dgd);
        else
            for (auto& d : s.dgd_taps) fn(d, s.trainable.dgd);
        if (uses_su2star(param)) {
            cplx_ref(s.su2_a, s.trainable.rotation);
            cplx_ref(s.su2_b, s.trainable.rotation);
        } else {
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) cplx_ref(s.matrix(a, b), s.trainable.rotation);
        }
    }
    if (m.trailing)
        for (auto& t : m.trailing->taps)
            for (auto& c : t) cplx_ref(c, m.trailing_trainable);
}

inline std::vector<double> trainable_values(const LdbpModel& m) {
    std::vector<double> v;
    for_each_parameter(m, [&](const double& x, bool tr) {
        if (tr) v.push_back(x);
    });
    return v;
}

inline void set_trainable_values(LdbpModel& m, std::span<const double> v) {
    std::size_t i = 0;
    for_each_parameter(m, [&](double& x, bool tr) {
        if (!tr) return;
        if (i >= v.size()) throw std::invalid_argument("set_trainable_values: too few values");
        x = v[i++];
    });
    if (i != v.size()) throw std::invalid_argument("set_trainable_values: too many values");
}

inline std::size_t trainable_count(const LdbpModel& m) {
    std::size_t n = 0;
    for_each_parameter(m, [&](const double&, bool tr) { n += tr ? 1 : 0; });
    return n;
}

/// Same structure as m with every parameter zeroed.
inline LdbpModel zeros_like(const LdbpModel& m) {
    LdbpModel z = m;
    for_each_parameter(z, [](double& x, bool) { x = 0.0; });
    if (!uses_su2star(m.parameterization) && !is_mimo(m.parameterization))
        for (auto& s : z.steps) s.matrix.setZero();
    return z;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace detail {
inline nlohmann::json cplx_array(std::span<const cplx> v) {
    auto a = nlohmann::json::array();
    for (const auto& z : v) a.push_back({z.real(), z.imag()});
    return a;
}
inline std::vector<cplx> cplx_vector(const nlohmann::json& j) {
    std::vector<cplx> v;
    for (const auto& e : j) v.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
    return v;
}
inline nlohmann::json mimo_json(const MimoTaps& m) {
    auto a = nlohmann::json::array();
    for (const auto& t : m.taps) a.push_back(cplx_array(t));
    return a;
}
inline MimoTaps mimo_from(const nlohmann::json& j) {
    MimoTaps m;
    for (std::size_t i = 0; i < 4; ++i) m.taps[i] = cplx_vector(j.at(i));
    return m;
}
} // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_to_json(const LdbpModel& m) {
    using nlohmann::json;
    json j;
    j["format"] = "ldbp-checkpoint";
    j["version"] = kCheckpointVersion;
    j["parameterization"] = to_string(m.parameterization);
    j["dgd_length"] = m.dgd_length;
    j["sample_rate_hz"] = m.sample_rate;
    j["seed_lineage"] = m.seed_lineage;
    auto steps = json::array();
    const auto p = m.parameterization;
    for (const auto& s : m.steps) {
        json e;
        e["cd_length_km"] = s.cd_length_km;
        e["gamma_per_w_km"] = s.gamma;
        e["kerr_length_km"] = s.kerr_length_km;
        e["activation"] = s.activation;
        e["cd_half"] = detail::cplx_array(s.cd_half);
        if (is_mimo(p)) {
            e["mimo"] = detail::mimo_json(s.mimo);
        } else {
            if (uses_lagrange(p)) e["tau_ps"] = s.tau_ps;
            else e["dgd_taps"] = s.dgd_taps;
            if (uses_su2star(p)) e["su2"] = {s.su2_a.real(), s.su2_a.imag(), s.su2_b.real(), s.su2_b.imag()};
            else {
                auto r = json::array();
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b) {
                        r.push_back(s.matrix(a, b).real());
                        r.push_back(s.matrix(a, b).imag());
                    }
                e["matrix"] = r;
            }
        }
        e["trainable"] = {{"cd", s.trainable.cd}, {"dgd", s.trainable.dgd}, {"rotation", s.trainable.rotation},
                          {"mimo", s.trainable.mimo}};
        steps.push_back(e);
    }
    j["steps"] = steps;
    if (m.trailing) j["trailing_mimo"] = {{"taps", detail::mimo_json(*m.trailing)}, {"trainable", m.trailing_trainable}};
    else j["trailing_mimo"] = nullptr;
    return j;
}

inline LdbpModel model_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ldbp-checkpoint") throw std::invalid_argument("not an ldbp checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw std::invalid_argument("unsupported checkpoint version");
    LdbpModel m;
    m.parameterization = parse_parameterization(j.at("parameterization").get<std::string>());
    m.dgd_length = j.at("dgd_length").get<std::size_t>();
    m.sample_rate = j.at("sample_rate_hz").get<double>();
    m.seed_lineage = j.at("seed_lineage").get<std::vector<std::uint64_t>>();
    const auto p = m.parameterization;
    for (const auto& e : j.at("steps")) {
        LdbpStep s;
        s.cd_length_km = e.at("cd_length_km").get<double>();
        s.gamma = e.at("gamma_per_w_km").get<double>();
        s.kerr_length_km = e.at("kerr_length_km").get<double>();
        s.activation = e.at("activation").get<bool>();
        s.cd_half = detail::cplx_vector(e.at("cd_half"));
        if (is_mimo(p)) {
            s.mimo = detail::mimo_from(e.at("mimo"));
        } else {
            if (uses_lagrange(p)) s.tau_ps = e.at("tau_ps").get<double>();
            else s.dgd_taps = e.at("dgd_taps").get<std::vector<double>>();
            if (uses_su2star(p)) {
                const auto v = e.at("su2").get<std::vector<double>>();
                s.su2_a = {v.at(0), v.at(1)};
                s.su2_b = {v.at(2), v.at(3)};
            } else {
                const auto v = e.at("matrix").get<std::vector<double>>();
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b) s.matrix(a, b) = {v.at(static_cast<std::size_t>(4 * a + 2 * b)), v.at(static_cast<std::size_t>(4 * a + 2 * b + 1))};
            }
        }
        const auto& t = e.at("trainable");
        s.trainable = {t.at("cd").get<bool>(), t.at("dgd").get<bool>(), t.at("rotation").get<bool>(), t.at("mimo").get<bool>()};
        m.steps.push_back(std::move(s));
    }
    const auto& tr = j.at("trailing_mimo");
    if (!tr.is_null()) {
        m.trailing = detail::mimo_from(tr.at("taps"));
        m.trailing_trainable = tr.at("trainable").get<bool>();
    }
    return m;
}

inline void save_model(const LdbpModel& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << model_to_json(m).dump(1) << '\n';
}

inline LdbpModel load_model(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return model_from_json(nlohmann::json::parse(f));
}

} // namespace ldbp
