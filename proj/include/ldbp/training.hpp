#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ldbp/data.hpp"
#include "ldbp/model.hpp"

namespace ldbp {

// ---------------------------------------------------------------------------
// loss

/// ||s^ - s||^2 / ||s^||^2, the reciprocal of effective_snr.
inline double nmse_loss(const SymbolSequence& hat_s, const SymbolSequence& ref_s) {
    double sig = 0.0, err = 0.0;
    detail::norms(hat_s, ref_s, sig, err);
    if (sig == 0.0) throw std::invalid_argument("nmse_loss: all-zero estimate");
    return err / sig;
}

struct LossEval {
    double loss = 0.0;     // NMSE after the genie phase rotation
    double signal = 0.0;   // ||s^||^2
    double error = 0.0;    // ||s^ - s||^2
    SymbolSequence grad;   // d/dRe + j d/dIm with respect to the unrotated estimate
};

/// Genie-phase NMSE of an estimate s~ and its gradient. With z = s^H s~ the
/// rotated error is ||s~||^2 + ||s||^2 - 2|z|, so the phase never needs to be
/// differentiated separately.
inline LossEval genie_nmse(const SymbolSequence& tilde_s, const SymbolSequence& ref_s, bool want_grad = true) {
    if (tilde_s.size() != ref_s.size()) throw std::invalid_argument("genie_nmse: length mismatch");
    cplx z{};
    double a = 0.0, r = 0.0;
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < ref_s.size(); ++i) {
            z += std::conj(ref_s.pol(p)[i]) * tilde_s.pol(p)[i];
            a += std::norm(tilde_s.pol(p)[i]);
            r += std::norm(ref_s.pol(p)[i]);
        }
    if (a == 0.0) throw std::invalid_argument("genie_nmse: all-zero estimate");
    // compute the error energy directly from the rotated estimate so that
    // loss * effective_snr matches to rounding
    const auto rotated = genie_phase_correct(tilde_s, ref_s);
    LossEval out;
    detail::norms(rotated, ref_s, out.signal, out.error);
    out.loss = out.error / out.signal;
    if (!want_grad) return out;
    const double az = std::abs(z);
    const double b = r - 2.0 * az;
    const cplx u = az > 0.0 ? z / az : cplx{1.0, 0.0};
    out.grad = tilde_s;
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < ref_s.size(); ++i)
            out.grad.pol(p)[i] = -2.0 * u * ref_s.pol(p)[i] / a - b * 2.0 * tilde_s.pol(p)[i] / (a * a);
    return out;
}

// ---------------------------------------------------------------------------
// reverse pass

namespace detail {

inline void kerr_adjoint(const DualPolSignal& in, double gamma, double h, DualPolSignal& g) {
    const double k = kManakovFactor * gamma * h;
    if (k == 0.0) return;
    for (std::size_t i = 0; i < in.size(); ++i) {
        const cplx x = in.x[i], y = in.y[i];
        const cplx e = unit_phasor(k * (std::norm(x) + std::norm(y)));
        const cplx gx = g.x[i], gy = g.y[i];
        const double s = (e * (x * std::conj(gx) + y * std::conj(gy))).imag();
        g.x[i] = gx * std::conj(e) - 2.0 * k * x * s;
        g.y[i] = gy * std::conj(e) - 2.0 * k * y * s;
    }
}

/// G_R = sum_n G_out[n] in[n]^H
inline Jones outer_gradient(const DualPolSignal& in, const DualPolSignal& g) {
    Jones r = Jones::Zero();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const cplx cx = std::conj(in.x[i]), cy = std::conj(in.y[i]);
        r(0, 0) += g.x[i] * cx;
        r(0, 1) += g.x[i] * cy;
        r(1, 0) += g.y[i] * cx;
        r(1, 1) += g.y[i] * cy;
    }
    return r;
}

inline DualPolSignal mimo_backward(const DualPolSignal& in, const MimoTaps& m, const DualPolSignal& g, MimoTaps* gm,
                                   bool need_input) {
    const std::size_t c = m.length() / 2;
    const auto lay = fir::centered(c);
    DualPolSignal gin;
    if (need_input) gin = DualPolSignal::zeros(in.size(), in.sample_rate);
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            const auto idx = static_cast<std::size_t>(2 * a + b);
            if (gm)
                for (std::size_t i = 0; i < m.length(); ++i)
                    gm->taps[idx][i] += fir::tap_gradient(in.pol(b), g.pol(a), lay.shift(i));
            if (need_input) fir::adjoint_accumulate<cplx>(g.pol(a), m.taps[idx], lay, gin.pol(b));
        }
    return gin;
}

} // namespace detail

/// Accumulate gradients of a scalar loss into `grad` (same structure as the
/// model) given the output gradient. Only trainable groups are filled.
/// Returns the gradient with respect to the model input.
inline DualPolSignal backward(const LdbpModel& model, const ForwardTrace& trace, DualPolSignal g, LdbpModel& grad,
                              bool need_input_grad = false) {
    if (trace.steps.size() != model.steps.size() || grad.steps.size() != model.steps.size())
        throw std::invalid_argument("backward: trace does not match the model");
    if (model.trailing) {
        MimoTaps* gm = model.trailing_trainable ? &*grad.trailing : nullptr;
        g = detail::mimo_backward(trace.before_trailing, *model.trailing, g, gm, true);
    }
    const auto param = model.parameterization;
    // earliest step whose parameters (or whose predecessors') need gradients
    std::size_t first_needed = model.steps.size();
    for (std::size_t k = 0; k < model.steps.size(); ++k) {
        const auto& t = model.steps[k].trainable;
        if (t.cd || t.dgd || t.rotation || t.mimo) {
            first_needed = k;
            break;
        }
    }
    for (std::size_t kk = model.steps.size(); kk-- > 0;) {
        if (kk < first_needed && !need_input_grad) break;
        const auto& s = model.steps[kk];
        const auto& t = trace.steps[kk];
        auto& gs = grad.steps[kk];
        if (s.activation) detail::kerr_adjoint(t.after_rot, s.gamma, s.kerr_length_km, g);

        DualPolSignal ga;
        if (is_mimo(param)) {
            ga = detail::mimo_backward(t.after_cd, s.mimo, g, s.trainable.mimo ? &gs.mimo : nullptr, true);
        } else {
            const Jones r = step_rotation(s, param);
            if (s.trainable.rotation) {
                const Jones gr = detail::outer_gradient(t.after_dgd, g);
                if (uses_su2star(param)) {
                    gs.su2_a += gr(0, 0) + std::conj(gr(1, 1));
                    gs.su2_b += gr(0, 1) - std::conj(gr(1, 0));
                } else {
                    gs.matrix += gr;
                }
            }
            rotate_inplace(g, r.adjoint());
            const auto d = model.dgd_taps(s);
            const std::size_t c = dgd_center(d.size());
            const auto lx = fir::centered(c), ly = fir::mirrored(c);
            if (s.trainable.dgd) {
                std::vector<double> gd(d.size());
                for (std::size_t i = 0; i < d.size(); ++i)
                    gd[i] = fir::tap_gradient(t.after_cd.x, g.x, lx.shift(i)).real() +
                            fir::tap_gradient(t.after_cd.y, g.y, ly.shift(i)).real();
                if (uses_lagrange(param)) {
                    const auto dd = lagrange_taps_gradient(s.tau_ps, d.size(), model.sample_rate);
                    for (std::size_t i = 0; i < d.size(); ++i) gs.tau_ps += gd[i] * dd[i];
                } else {
                    for (std::size_t i = 0; i < d.size(); ++i) gs.dgd_taps[i] += gd[i];
                }
            }
            ga = DualPolSignal::zeros(g.size(), g.sample_rate);
            fir::adjoint_accumulate<double>(g.x, d, lx, ga.x);
            fir::adjoint_accumulate<double>(g.y, d, ly, ga.y);
        }

        const std::size_t m = s.cd_half.size() - 1;
        const auto lc = fir::centered(m);
        if (s.trainable.cd) {
            std::vector<cplx> gf(2 * m + 1);
            for (std::size_t i = 0; i < gf.size(); ++i)
                gf[i] = fir::tap_gradient(t.input.x, ga.x, lc.shift(i)) + fir::tap_gradient(t.input.y, ga.y, lc.shift(i));
            gs.cd_half[0] += gf[m];
            for (std::size_t i = 1; i <= m; ++i) gs.cd_half[i] += gf[m + i] + gf[m - i];
        }
        if (kk == 0 && !need_input_grad) break;
        const auto full = s.cd_taps();
        g = DualPolSignal::zeros(ga.size(), ga.sample_rate);
        fir::adjoint_accumulate<cplx>(ga.x, full, lc, g.x);
        fir::adjoint_accumulate<cplx>(ga.y, full, lc, g.y);
    }
    return g;
}

/// Records forward passes of minibatch elements and runs the reverse pass of
/// the averaged loss.
class GradientTape {
public:
    GradientTape(const LdbpModel& model, PulseShape rx_shape) : model_(model), rx_(rx_shape) {}

    /// Forward one element; returns its loss.
    const LossEval& record(const DualPolSignal& v, const SymbolSequence& ref) {
        Entry e;
        const auto w = forward(model_, v, &e.trace);
        e.eval = genie_nmse(matched_filter_downsample(w, rx_), ref, true);
        entries_.push_back(std::move(e));
        return entries_.back().eval;
    }

    std::size_t size() const { return entries_.size(); }
    const LossEval& eval(std::size_t i) const { return entries_.at(i).eval; }

    double mean_loss() const {
        double s = 0.0;
        for (const auto& e : entries_) s += e.eval.loss;
        return s / static_cast<double>(entries_.size());
    }

    /// Gradient of the mean loss in the model's layout (zeros for frozen groups).
    LdbpModel backward() const {
        if (entries_.empty()) throw std::logic_error("GradientTape: nothing recorded");
        LdbpModel g = zeros_like(model_);
        const double scale = 1.0 / static_cast<double>(entries_.size());
        for (const auto& e : entries_) {
            SymbolSequence gs = e.eval.grad;
            for (int p = 0; p < 2; ++p)
                for (auto& v : gs.pol(p)) v *= scale;
            auto gw = matched_filter_adjoint(gs, rx_, model_.sample_rate);
            ldbp::backward(model_, e.trace, std::move(gw), g);
        }
        return g;
    }

private:
    struct Entry {
        ForwardTrace trace;
        LossEval eval;
    };
    const LdbpModel& model_;
    PulseShape rx_;
    std::vector<Entry> entries_;
};

/// Loss and gradient of one element, for use by parallel minibatch code.
inline LossEval element_gradient(const LdbpModel& model, const Example& ex, const PulseShape& rx, double scale, LdbpModel& grad) {
    ForwardTrace tr;
    const auto w = forward(model, ex.v, &tr);
    auto ev = genie_nmse(matched_filter_downsample(w, rx), ex.s, true);
    SymbolSequence gs = ev.grad;
    for (int p = 0; p < 2; ++p)
        for (auto& v : gs.pol(p)) v *= scale;
    backward(model, tr, matched_filter_adjoint(gs, rx, model.sample_rate), grad);
    return ev;
}

// ---------------------------------------------------------------------------
// optimizers

enum class OptimizerKind { Adam, Sgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }
inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd") return OptimizerKind::Sgd;
    throw std::invalid_argument("unknown optimizer: " + s);
}

struct AdamState {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t t = 0;
    std::vector<double> m, v;
};

/// One optimizer update in place. SGD applies theta - eta g.
inline void adam_step(AdamState& st, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: size mismatch");
    if (st.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= st.learning_rate * grads[i];
        ++st.t;
        return;
    }
    if (st.m.empty()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
    }
    if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state size mismatch");
    ++st.t;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        const double mh = st.m[i] / c1;
        const double vh = st.v[i] / c2;
        params[i] -= st.learning_rate * mh / (std::sqrt(vh) + st.epsilon);
    }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
    std::size_t minibatch_size = 16;
    std::size_t n_iterations = 300;
    std::size_t validation_size = 50;
    double learning_rate = 5e-4;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::size_t workers = 1;
    bool record_timing = true; // false writes zero wall times (byte-stable CSVs)

    void validate() const {
        if (minibatch_size == 0 || validation_size == 0) throw std::invalid_argument("TrainConfig: sizes must be positive");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("TrainConfig: learning rate must be finite and >= 0");
    }
};

struct IterationRecord {
    std::size_t iteration = 0;
    double train_loss = 0.0;   // mean minibatch NMSE before the update
    double val_nmse = 0.0;     // pooled over the validation batch, after the update
    double val_snr = 0.0;      // pooled effective SNR, linear
    double val_snr_db = 0.0;
    double reciprocal_error = 0.0; // max |nmse * snr - 1| over this iteration's evaluations
    double wall_ms = 0.0;
};

struct TrainRecord {
    double initial_val_snr_db = 0.0;
    double initial_val_nmse = 0.0;
    std::vector<IterationRecord> iterations;

    double final_snr_db() const { return iterations.empty() ? initial_val_snr_db : iterations.back().val_snr_db; }
    /// Validation SNR after 0, 1, 2, ... updates.
    std::vector<double> snr_db_curve() const {
        std::vector<double> c{initial_val_snr_db};
        for (const auto& r : iterations) c.push_back(r.val_snr_db);
        return c;
    }
    double max_reciprocal_error() const {
        double e = 0.0;
        for (const auto& r : iterations) e = std::max(e, r.reciprocal_error);
        return e;
    }
};

struct DivergenceError : std::runtime_error {
    std::size_t iteration;
    DivergenceError(const std::string& what, std::size_t it) : std::runtime_error(what), iteration(it) {}
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Learning curve as CSV. Row 0 is the initial validation state; its loss
/// column is empty because no minibatch has been seen yet.
inline std::string record_csv(const TrainRecord& r) {
    std::ostringstream os;
    os << "iteration,loss,eff_snr_db,wall_ms,val_nmse,reciprocal_error\n";
    os << 0 << ",," << format_double(r.initial_val_snr_db) << ",0," << format_double(r.initial_val_nmse) << ",\n";
    for (const auto& it : r.iterations)
        os << it.iteration << ',' << format_double(it.train_loss) << ',' << format_double(it.val_snr_db) << ','
           << format_double(it.wall_ms) << ',' << format_double(it.val_nmse) << ',' << format_double(it.reciprocal_error)
           << '\n';
    return os.str();
}

/// Smallest k such that every entry from k on is at least the final dB value
/// minus 1% of its magnitude.
inline std::size_t convergence_iterations(std::span<const double> snr_db) {
    if (snr_db.empty()) throw std::invalid_argument("convergence_iterations: empty record");
    const double target = snr_db.back() - 0.01 * std::abs(snr_db.back());
    std::size_t k = snr_db.size();
    while (k > 0 && snr_db[k - 1] >= target) --k;
    return k;
}

/// Same, with the initial validation value at index 0 so k counts updates.
inline std::size_t convergence_iterations(const TrainRecord& r) { return convergence_iterations(r.snr_db_curve()); }

struct ValidationResult {
    double nmse = 0.0;
    double snr = 0.0;
    double reciprocal_error = 0.0;
};

/// Pooled genie-phase metrics of a model over a batch.
inline ValidationResult evaluate(const LdbpModel& model, std::span<const Example* const> batch, const PulseShape& rx,
                                 std::size_t workers = 1) {
    std::vector<LossEval> evs(batch.size());
    auto work = [&](std::size_t i) { evs[i] = genie_nmse(matched_filter_downsample(forward(model, batch[i]->v), rx), batch[i]->s, false); };
    if (workers <= 1) {
        for (std::size_t i = 0; i < batch.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < workers; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t i = t; i < batch.size(); i += workers) work(i);
            });
        for (auto& th : pool) th.join();
    }
    double sig = 0.0, err = 0.0;
    for (const auto& e : evs) {
        sig += e.signal;
        err += e.error;
    }
    ValidationResult r;
    r.nmse = err / sig;
    r.snr = sig / err;
    r.reciprocal_error = std::abs(r.nmse * r.snr - 1.0);
    return r;
}

/// Observer called after every iteration; returning false stops training.
using IterationHook = std::function<bool(const IterationRecord&, const LdbpModel&)>;

/// Minibatch training of the model's trainable parameters on `data`.
/// Element gradients are summed in a fixed order, so results do not depend
/// on the worker count.
inline TrainRecord train(LdbpModel& model, const TrainConfig& cfg, Dataset& data, const IterationHook& hook = {}) {
    cfg.validate();
    const auto rx = data.link().rx_shape();
    const auto val = data.validation(cfg.validation_size, cfg.workers);
    TrainRecord rec;
    {
        const auto v0 = evaluate(model, val, rx, cfg.workers);
        rec.initial_val_nmse = v0.nmse;
        rec.initial_val_snr_db = linear_to_db(v0.snr);
    }
    AdamState opt;
    opt.kind = cfg.optimizer;
    opt.learning_rate = cfg.learning_rate;
    auto params = trainable_values(model);
    const double scale = 1.0 / static_cast<double>(cfg.minibatch_size);
    for (std::size_t it = 0; it < cfg.n_iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        data.prefetch(it, cfg.minibatch_size, cfg.workers);
        std::vector<LdbpModel> grads(cfg.minibatch_size, zeros_like(model));
        std::vector<LossEval> evs(cfg.minibatch_size);
        auto work = [&](std::size_t e) { evs[e] = element_gradient(model, data.get(it, e), rx, scale, grads[e]); };
        if (cfg.workers <= 1) {
            for (std::size_t e = 0; e < cfg.minibatch_size; ++e) work(e);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < cfg.workers; ++t)
                pool.emplace_back([&, t] {
                    for (std::size_t e = t; e < cfg.minibatch_size; e += cfg.workers) work(e);
                });
            for (auto& th : pool) th.join();
        }
        IterationRecord r;
        r.iteration = it + 1;
        double loss = 0.0;
        for (const auto& e : evs) {
            loss += e.loss;
            r.reciprocal_error = std::max(r.reciprocal_error, std::abs(e.loss * (e.signal / e.error) - 1.0));
        }
        r.train_loss = loss * scale;
        std::vector<double> g(params.size(), 0.0);
        for (const auto& gm : grads) {
            const auto gv = trainable_values(gm);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv[i];
        }
        const bool finite_grad = std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); });
        if (!std::isfinite(r.train_loss) || !finite_grad)
            throw DivergenceError("training diverged at iteration " + std::to_string(it + 1) +
                                      ": loss=" + format_double(r.train_loss) + (finite_grad ? "" : ", non-finite gradient"),
                                  it + 1);
        adam_step(opt, params, g);
        set_trainable_values(model, params);
        const auto v = evaluate(model, val, rx, cfg.workers);
        if (!std::isfinite(v.nmse))
            throw DivergenceError("validation diverged at iteration " + std::to_string(it + 1), it + 1);
        r.val_nmse = v.nmse;
        r.val_snr = v.snr;
        r.val_snr_db = linear_to_db(v.snr);
        r.reciprocal_error = std::max(r.reciprocal_error, v.reciprocal_error);
        const auto t1 = std::chrono::steady_clock::now();
        r.wall_ms = cfg.record_timing ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
        rec.iterations.push_back(r);
        if (hook && !hook(r, model)) break;
    }
    return rec;
}

struct TrainResult {
    LdbpModel model;
    TrainRecord record;
};

/// Stage 1: CD taps only, PMD absent from the data.
inline TrainResult train_ldbp(LdbpModel init, const TrainConfig& cfg, Dataset& pmd_free_data, const IterationHook& hook = {}) {
    if (!pmd_free_data.pmd().empty()) throw std::invalid_argument("train_ldbp: channel must be PMD-free");
    init.set_trainable(cd_only_groups());
    TrainResult r{std::move(init), {}};
    r.record = train(r.model, cfg, pmd_free_data, hook);
    return r;
}

/// Stage 2: CD frozen, PMD parts of the chosen parameterization trained.
inline TrainResult train_ldbp_pmd(const LdbpModel& pretrained, Parameterization param, RotationInit rot, Rng& rng,
                                  const TrainConfig& cfg, Dataset& data, const IterationHook& hook = {}) {
    TrainResult r{reparameterize(pretrained, param, rot, rng), {}};
    r.record = train(r.model, cfg, data, hook);
    return r;
}

/// Frozen LDBP followed by one trainable 2x2 MIMO-FIR of the given length.
inline TrainResult train_lumped_mimo(const LdbpModel& pretrained, std::size_t mimo_length, const TrainConfig& cfg, Dataset& data,
                                     const IterationHook& hook = {}) {
    if (mimo_length < 1) throw std::invalid_argument("train_lumped_mimo: length must be >= 1");
    TrainResult r{pretrained, {}};
    r.model.set_trainable({});
    r.model.trailing = MimoTaps::delta(mimo_length, Jones::Identity());
    r.model.trailing_trainable = true;
    r.record = train(r.model, cfg, data, hook);
    return r;
}

} // namespace ldbp
