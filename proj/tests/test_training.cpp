#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ldbp/training.hpp"

using namespace ldbp;

namespace {

/// Two-step model on 64 samples with every group trainable and all values generic.
LdbpModel small_model(Parameterization p, Rng& rng, bool trailing = false) {
    LdbpModel m;
    m.parameterization = p;
    m.dgd_length = 5;
    m.sample_rate = 64e9;
    for (int k = 0; k < 2; ++k) {
        LdbpStep s;
        s.activation = k == 0;
        s.gamma = -24.0; // strong enough that the Kerr coupling dominates some coordinates
        s.kerr_length_km = 1.0;
        s.cd_half.resize(3);
        for (auto& c : s.cd_half) c = {0.3 * rng.normal(), 0.3 * rng.normal()};
        s.cd_half[0] += 1.0;
        s.dgd_taps.resize(5);
        for (auto& d : s.dgd_taps) d = 0.2 * rng.normal();
        s.dgd_taps[2] += 1.0;
        s.tau_ps = 3.0 * rng.normal();
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) s.matrix(a, b) = {rng.normal(), rng.normal()};
        s.su2_a = {rng.normal(), rng.normal()};
        s.su2_b = {rng.normal(), rng.normal()};
        s.mimo = MimoTaps::delta(5, sample_su2(rng));
        for (auto& t : s.mimo.taps)
            for (auto& c : t) c += cplx(0.1 * rng.normal(), 0.1 * rng.normal());
        s.trainable = {true, true, true, true};
        m.steps.push_back(s);
    }
    if (trailing) {
        m.trailing = MimoTaps::delta(3, Jones::Identity());
        for (auto& t : m.trailing->taps)
            for (auto& c : t) c += cplx(0.1 * rng.normal(), 0.1 * rng.normal());
        m.trailing_trainable = true;
    }
    return m;
}

Example small_example(Rng& rng) {
    Example ex;
    ex.v = DualPolSignal::zeros(64, 64e9);
    for (int p = 0; p < 2; ++p)
        for (auto& c : ex.v.pol(p)) c = rng.complex_normal(0.03);
    ex.s.symbol_rate = 32e9;
    ex.s.sx.resize(32);
    ex.s.sy.resize(32);
    for (int p = 0; p < 2; ++p)
        for (auto& c : ex.s.pol(p)) c = rng.complex_normal(0.03);
    return ex;
}

const PulseShape kRx{0.01, 0, 2};

double model_loss(const LdbpModel& m, const Example& ex) {
    return genie_nmse(matched_filter_downsample(forward(m, ex.v), kRx), ex.s, false).loss;
}

/// Worst relative error between the reverse-mode gradient and central differences.
double worst_fd_error(const LdbpModel& m, const Example& ex, std::size_t* count = nullptr) {
    LdbpModel g = zeros_like(m);
    element_gradient(m, ex, kRx, 1.0, g);
    const auto gv = trainable_values(g);
    const auto p0 = trainable_values(m);
    if (count) *count = p0.size();
    double worst = 0.0;
    for (std::size_t i = 0; i < p0.size(); ++i) {
        auto pp = p0, pm = p0;
        const double h = 1e-6;
        pp[i] += h;
        pm[i] -= h;
        LdbpModel a = m, b = m;
        set_trainable_values(a, pp);
        set_trainable_values(b, pm);
        const double fd = (model_loss(a, ex) - model_loss(b, ex)) / (2.0 * h);
        const double rel = std::abs(fd - gv[i]) / std::max({std::abs(fd), std::abs(gv[i]), 1e-8});
        worst = std::max(worst, rel);
    }
    return worst;
}

LinkConfig quick_link() {
    LinkConfig link;
    link.fiber.n_spans = 1;
    link.fiber.span_length_km = 25.0;
    link.fiber.correlation_length_km = 1.0;
    link.fiber.gamma_per_w_km = 0.0;
    link.forward_steps_per_span = 25;
    link.n_sym = 256;
    link.power_dbm = 0.0;
    return link;
}

double ideal_snr_db(Dataset& data, std::size_t count, const std::function<DualPolSignal(const DualPolSignal&)>& eq) {
    double sig = 0.0, err = 0.0;
    for (const auto* e : data.validation(count)) {
        const auto ev = genie_nmse(matched_filter_downsample(eq(e->v), data.link().rx_shape()), e->s, false);
        sig += ev.signal;
        err += ev.error;
    }
    return linear_to_db(sig / err);
}

} // namespace

// ---------------------------------------------------------------------------
// loss

TEST(NmseLoss, Basics) {
    SymbolSequence s({cplx{1.0, 0.5}, cplx{-0.2, 0.0}}, {cplx{0.0, 1.0}, cplx{0.3, 0.3}}, 32e9);
    EXPECT_EQ(nmse_loss(s, s), 0.0);
    SymbolSequence hat({cplx{2.0, 0.0}}, {cplx{0.0, 0.0}}, 32e9);
    SymbolSequence ref({cplx{1.0, 0.0}}, {cplx{0.0, 0.0}}, 32e9);
    EXPECT_DOUBLE_EQ(nmse_loss(hat, ref), 0.25);
    SymbolSequence zero({cplx{}}, {cplx{}}, 32e9);
    EXPECT_THROW(nmse_loss(zero, ref), std::invalid_argument);
}

TEST(NmseLoss, ReciprocalOfEffectiveSnr) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        SymbolSequence a = generate_symbols(64, 0.0, rng), b = generate_symbols(64, 0.0, rng);
        EXPECT_NEAR(nmse_loss(a, b) * effective_snr(a, b).ratio, 1.0, 1e-12);
        const auto ev = genie_nmse(a, b, false);
        EXPECT_NEAR(ev.loss * (ev.signal / ev.error), 1.0, 1e-12);
    }
}

TEST(GenieLoss, MatchesExplicitPhaseCorrection) {
    Rng rng(2);
    const auto s = generate_symbols(128, 0.0, rng);
    auto t = s;
    for (int p = 0; p < 2; ++p)
        for (auto& v : t.pol(p)) v = v * std::polar(1.1, 0.7) + rng.complex_normal(0.1);
    const auto ev = genie_nmse(t, s, false);
    EXPECT_NEAR(ev.loss, nmse_loss(genie_phase_correct(t, s), s), 1e-14);
}

TEST(GenieLoss, GradientMatchesFiniteDifferences) {
    Rng rng(3);
    const auto s = generate_symbols(16, 0.0, rng);
    auto t = s;
    for (int p = 0; p < 2; ++p)
        for (auto& v : t.pol(p)) v = v * std::polar(0.8, -1.9) + rng.complex_normal(0.2);
    const auto ev = genie_nmse(t, s, true);
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < s.size(); ++i)
            for (int part = 0; part < 2; ++part) {
                const cplx d = part == 0 ? cplx(1e-6, 0.0) : cplx(0.0, 1e-6);
                auto a = t, b = t;
                a.pol(p)[i] += d;
                b.pol(p)[i] -= d;
                const double fd = (genie_nmse(a, s, false).loss - genie_nmse(b, s, false).loss) / 2e-6;
                const double an = part == 0 ? ev.grad.pol(p)[i].real() : ev.grad.pol(p)[i].imag();
                EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd)));
            }
}

// ---------------------------------------------------------------------------
// reverse pass

TEST(Backward, FiniteDifferencesAllParameterizations) {
    for (auto p : kAllParameterizations) {
        Rng rng(7);
        const auto m = small_model(p, rng);
        const auto ex = small_example(rng);
        std::size_t n = 0;
        EXPECT_LT(worst_fd_error(m, ex, &n), 1e-5) << to_string(p);
        EXPECT_EQ(n, trainable_count(m));
    }
}

TEST(Backward, FiniteDifferencesTrailingMimo) {
    Rng rng(8);
    const auto m = small_model(Parameterization::FreeDgdSu2Star, rng, true);
    const auto ex = small_example(rng);
    EXPECT_LT(worst_fd_error(m, ex), 1e-5);
}

TEST(Backward, SingleScalarTapClosedForm) {
    // w = c v with gamma = 0: L(c) = 1 + ||s||^2 / (|c|^2 A) - 2 |z| / (|c| A),
    // A = ||y||^2, z = s^H y, y the matched-filter output of v
    Rng rng(9);
    const auto ex = small_example(rng);
    LdbpModel m;
    m.parameterization = Parameterization::FreeDgdFreeMatrix;
    m.dgd_length = 1;
    LdbpStep st;
    st.activation = false;
    st.cd_half = {cplx(0.8, -0.6)};
    st.dgd_taps = {1.0};
    st.trainable = {true, false, false, false};
    m.steps.push_back(st);
    LdbpModel g = zeros_like(m);
    element_gradient(m, ex, kRx, 1.0, g);

    const auto y = matched_filter_downsample(ex.v, kRx);
    double a = 0.0, ss = 0.0;
    cplx z{};
    for (int p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < y.size(); ++i) {
            a += std::norm(y.pol(p)[i]);
            ss += std::norm(ex.s.pol(p)[i]);
            z += std::conj(ex.s.pol(p)[i]) * y.pol(p)[i];
        }
    const cplx c = st.cd_half[0];
    const double r = std::abs(c);
    const double dldr = -2.0 * ss / (r * r * r * a) + 2.0 * std::abs(z) / (r * r * a);
    const cplx want = dldr * c / r;
    EXPECT_NEAR(std::abs(g.steps[0].cd_half[0] - want), 0.0, 1e-10 * std::abs(want));
}

TEST(Backward, FrozenGroupsGetZeroGradient) {
    Rng rng(10);
    auto m = small_model(Parameterization::FreeDgdSu2Star, rng);
    m.set_trainable(pmd_groups(m.parameterization));
    const auto ex = small_example(rng);
    LdbpModel g = zeros_like(m);
    element_gradient(m, ex, kRx, 1.0, g);
    for (const auto& s : g.steps)
        for (const auto& c : s.cd_half) EXPECT_EQ(c, cplx{});
    double norm = 0.0;
    for (double v : trainable_values(g)) norm += v * v;
    EXPECT_GT(norm, 0.0);
}

TEST(Backward, TapeAveragesElements) {
    Rng rng(11);
    const auto m = small_model(Parameterization::LagrangeSu2Star, rng);
    const auto e1 = small_example(rng), e2 = small_example(rng), e3 = small_example(rng);
    GradientTape tape(m, kRx);
    tape.record(e1.v, e1.s);
    tape.record(e2.v, e2.s);
    tape.record(e3.v, e3.s);
    EXPECT_EQ(tape.size(), 3u);
    EXPECT_NEAR(tape.mean_loss(), (model_loss(m, e1) + model_loss(m, e2) + model_loss(m, e3)) / 3.0, 1e-15);
    const auto gt = trainable_values(tape.backward());
    LdbpModel g = zeros_like(m);
    for (const auto* e : {&e1, &e2, &e3}) element_gradient(m, *e, kRx, 1.0 / 3.0, g);
    const auto ge = trainable_values(g);
    ASSERT_EQ(gt.size(), ge.size());
    for (std::size_t i = 0; i < gt.size(); ++i) EXPECT_NEAR(gt[i], ge[i], 1e-12 * (1.0 + std::abs(ge[i])));
    GradientTape empty(m, kRx);
    EXPECT_THROW(empty.backward(), std::logic_error);
}

TEST(Backward, TraceMismatchThrows) {
    Rng rng(12);
    const auto m = small_model(Parameterization::FreeDgdSu2Star, rng);
    const auto ex = small_example(rng);
    ForwardTrace tr;
    forward(m, ex.v, &tr);
    tr.steps.pop_back();
    LdbpModel g = zeros_like(m);
    EXPECT_THROW(backward(m, tr, ex.v, g), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// optimizers

TEST(Optimizer, ZeroGradientLeavesParameters) {
    AdamState st;
    std::vector<double> p{1.0, -2.0, 3.0};
    const auto p0 = p;
    const std::vector<double> g(3, 0.0);
    for (int i = 0; i < 5; ++i) adam_step(st, p, g);
    EXPECT_EQ(p, p0);
    st = AdamState{};
    st.kind = OptimizerKind::Sgd;
    adam_step(st, p, g);
    EXPECT_EQ(p, p0);
}

TEST(Optimizer, SgdIsPlainGradientStep) {
    AdamState st;
    st.kind = OptimizerKind::Sgd;
    st.learning_rate = 1.0;
    std::vector<double> p{1.0, -2.0};
    const std::vector<double> g{0.25, -4.0};
    adam_step(st, p, g);
    EXPECT_EQ(p[0], 0.75);
    EXPECT_EQ(p[1], 2.0);
}

TEST(Optimizer, AdamFirstStepClosedForm) {
    AdamState st;
    st.learning_rate = 0.01;
    std::vector<double> p{0.5, 0.5, 0.5, 0.5};
    const std::vector<double> g{3.0, -1e-3, 1e-9, -250.0};
    adam_step(st, p, g);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double want = 0.5 - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
        EXPECT_NEAR(p[i], want, 1e-15);
    }
}

TEST(Optimizer, ConvexQuadraticDecreasesMonotonically) {
    // f = sum a_i (x_i - b_i)^2, a_i in [0.5, 2]
    const std::vector<double> a{0.5, 1.0, 2.0, 1.5}, b{1.0, -3.0, 0.25, 2.0};
    auto f = [&](const std::vector<double>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += a[i] * (x[i] - b[i]) * (x[i] - b[i]);
        return s;
    };
    auto grad = [&](const std::vector<double>& x) {
        std::vector<double> g(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * a[i] * (x[i] - b[i]);
        return g;
    };
    for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
        AdamState st;
        st.kind = kind;
        st.learning_rate = kind == OptimizerKind::Sgd ? 0.1 : 0.01;
        std::vector<double> x(4, 0.0);
        double prev = f(x);
        const int budget = kind == OptimizerKind::Sgd ? 200 : 2000;
        int it = 0;
        for (; it < budget && prev > 1e-8; ++it) {
            adam_step(st, x, grad(x));
            const double cur = f(x);
            EXPECT_LE(cur, prev) << to_string(kind) << " iteration " << it;
            prev = cur;
        }
        EXPECT_LE(prev, 1e-8) << to_string(kind);
    }
}

// ---------------------------------------------------------------------------
// convergence statistic

TEST(Convergence, ConstantIsZero) {
    const std::vector<double> c(20, 12.5);
    EXPECT_EQ(convergence_iterations(c), 0u);
}

TEST(Convergence, PlateauAtTen) {
    std::vector<double> c;
    for (int i = 0; i <= 30; ++i) c.push_back(i < 10 ? 10.0 + i : 20.0);
    // 0.99 * 20 = 19.8 is first reached at index 10
    EXPECT_EQ(convergence_iterations(c), 10u);
}

TEST(Convergence, BruteForceOnNoisyRecords) {
    Rng rng(13);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> c;
        const int n = 1 + static_cast<int>(rng.uniform() * 60);
        // offset so some records end below 0 dB
        const double base = -5.0 + 10.0 * rng.uniform();
        for (int i = 0; i < n; ++i) c.push_back(base + 20.0 * (1.0 - std::exp(-i / 8.0)) + 0.3 * rng.normal());
        const double fin = c.back();
        std::size_t brute = c.size();
        for (std::size_t k = 0; k < c.size(); ++k) {
            bool ok = true;
            for (std::size_t j = k; j < c.size(); ++j) ok = ok && c[j] >= fin - 0.01 * std::abs(fin);
            if (ok) {
                brute = k;
                break;
            }
        }
        EXPECT_EQ(convergence_iterations(c), brute);
    }
    EXPECT_THROW(convergence_iterations(std::vector<double>{}), std::invalid_argument);
    EXPECT_EQ(convergence_iterations(std::vector<double>{-3.0}), 0u);
    EXPECT_EQ(convergence_iterations(std::vector<double>{-9.0, -3.02, -3.0}), 1u);
}

TEST(Convergence, RecordCountsUpdates) {
    TrainRecord r;
    r.initial_val_snr_db = 20.0;
    for (int i = 1; i <= 5; ++i) {
        IterationRecord it;
        it.iteration = static_cast<std::size_t>(i);
        it.val_snr_db = 20.0;
        r.iterations.push_back(it);
    }
    EXPECT_EQ(convergence_iterations(r), 0u);
    r.initial_val_snr_db = 5.0;
    EXPECT_EQ(convergence_iterations(r), 1u);
}

// ---------------------------------------------------------------------------
// training loops on small links

TEST(Train, ZeroIterationsAndZeroLearningRate) {
    auto link = quick_link();
    Dataset data(link, {}, 21);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 9.0);
    Rng rng(22);
    const auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::RandomSu2, rng);
    TrainConfig cfg;
    cfg.minibatch_size = 2;
    cfg.validation_size = 2;
    cfg.n_iterations = 0;
    const auto r0 = train_ldbp(m0, cfg, data);
    EXPECT_TRUE(r0.record.iterations.empty());
    EXPECT_EQ(trainable_values(r0.model), trainable_values([&] {
                  auto c = m0;
                  c.set_trainable(cd_only_groups());
                  return c;
              }()));
    cfg.n_iterations = 3;
    cfg.learning_rate = 0.0;
    auto r1 = train_ldbp_pmd(m0, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng, cfg, data);
    const auto before = reparameterize(m0, Parameterization::FreeDgdSu2Star, RotationInit::Identity, *std::make_unique<Rng>(0));
    EXPECT_EQ(trainable_values(r1.model), trainable_values(before));
    EXPECT_EQ(r1.record.iterations.size(), 3u);
}

TEST(Train, StageOneRequiresPmdFreeData) {
    auto link = quick_link();
    Rng prng(1);
    Dataset data(link, sample_pmd_realization(link.fiber, prng), 23);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 9.0);
    Rng rng(2);
    const auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
    EXPECT_THROW(train_ldbp(m0, TrainConfig{}, data), std::invalid_argument);
}

TEST(Train, LinearChannelReachesInverseCdBound) {
    auto link = quick_link();
    link.power_dbm = -10.0; // noise-limited so the bound does not hinge on filter truncation
    Dataset data(link, {}, 24);
    const double bound = ideal_snr_db(data, 8, [&](const DualPolSignal& v) {
        return apply_cd(v, -link.fiber.beta2_ps2_per_km, link.fiber.total_length_km());
    });
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 15.0);
    Rng rng(25);
    auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
    // start from taps that undo only half of each step's dispersion
    for (auto& s : m0.steps) {
        s.cd_half = design_inverse_cd_taps(s.cd_length(), link.fiber.beta2_ps2_per_km, 0.5 * s.cd_length_km, link.rx_rate());
    }
    TrainConfig cfg;
    cfg.minibatch_size = 4;
    cfg.validation_size = 8;
    cfg.n_iterations = 300;
    cfg.learning_rate = 2e-2;
    const auto r = train_ldbp(m0, cfg, data);
    EXPECT_LT(r.record.initial_val_snr_db, bound - 3.0);
    EXPECT_GE(r.record.final_snr_db(), bound - 1.0) << "bound " << bound;
    EXPECT_LT(r.record.max_reciprocal_error(), 1e-12);
}

TEST(Train, DeterministicRecord) {
    auto link = quick_link();
    link.fiber.gamma_per_w_km = 1.2;
    link.power_dbm = 6.0;
    Rng prng(3);
    const auto pmd = sample_pmd_realization(link.fiber, prng);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 9.0);
    auto run = [&](std::size_t workers) {
        Dataset data(link, pmd, 26);
        Rng rng(27);
        const auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
        TrainConfig cfg;
        cfg.minibatch_size = 3;
        cfg.validation_size = 3;
        cfg.n_iterations = 4;
        cfg.learning_rate = 1e-2;
        cfg.record_timing = false;
        cfg.workers = workers;
        Rng r2(28);
        const auto res = train_ldbp_pmd(m0, Parameterization::FreeDgdSu2Star, RotationInit::RandomSu2, r2, cfg, data);
        return std::make_pair(record_csv(res.record), model_to_json(res.model).dump());
    };
    const auto a = run(1), b = run(1), c = run(3);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_EQ(a.first, c.first);
    EXPECT_EQ(a.second, c.second);
    EXPECT_EQ(a.first.substr(0, a.first.find('\n')), "iteration,loss,eff_snr_db,wall_ms,val_nmse,reciprocal_error");
}

TEST(Train, FrozenParametersBitIdentical) {
    auto link = quick_link();
    link.fiber.gamma_per_w_km = 1.2;
    Rng prng(4);
    Dataset data(link, sample_pmd_realization(link.fiber, prng), 29);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 9.0);
    Rng rng(30);
    const auto m0 = init_model(plan, link.fiber, Parameterization::LagrangeFreeMatrix, RotationInit::RandomSu2, rng);
    TrainConfig cfg;
    cfg.minibatch_size = 2;
    cfg.validation_size = 2;
    cfg.n_iterations = 5;
    cfg.learning_rate = 1e-2;
    const auto r = train_ldbp_pmd(m0, Parameterization::LagrangeFreeMatrix, RotationInit::RandomSu2, rng, cfg, data);
    for (std::size_t k = 0; k < m0.steps.size(); ++k) {
        EXPECT_EQ(r.model.steps[k].cd_half, m0.steps[k].cd_half);
        EXPECT_EQ(r.model.steps[k].gamma, m0.steps[k].gamma);
    }
    bool moved = false;
    for (std::size_t k = 0; k < m0.steps.size(); ++k) moved = moved || r.model.steps[k].tau_ps != 0.0;
    EXPECT_TRUE(moved);
}

TEST(Train, PmdFreeIdentityInitStaysAtOptimum) {
    auto link = quick_link();
    link.fiber.gamma_per_w_km = 1.2;
    link.power_dbm = 4.0;
    Dataset data(link, {}, 31);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 15.0);
    Rng rng(32);
    const auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
    TrainConfig cfg;
    cfg.minibatch_size = 4;
    cfg.validation_size = 8;
    cfg.n_iterations = 20;
    cfg.learning_rate = 1e-3;
    const auto r = train_ldbp_pmd(m0, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng, cfg, data);
    EXPECT_GE(r.record.final_snr_db(), r.record.initial_val_snr_db - 0.05);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        first += r.record.iterations[i].train_loss;
        last += r.record.iterations[r.record.iterations.size() - 1 - i].train_loss;
    }
    EXPECT_LE(last, first * 1.05);
}

TEST(Train, DivergenceIsReported) {
    auto link = quick_link();
    link.fiber.gamma_per_w_km = 1.2;
    link.power_dbm = 4.0;
    Dataset data(link, {}, 33);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 9.0);
    Rng rng(34);
    auto m0 = init_model(plan, link.fiber, Parameterization::FreeDgdFreeMatrix, RotationInit::Identity, rng);
    TrainConfig cfg;
    cfg.minibatch_size = 2;
    cfg.validation_size = 2;
    cfg.n_iterations = 50;
    cfg.learning_rate = 1e300;
    EXPECT_THROW(train(m0, cfg, data), DivergenceError);
}

TEST(LumpedMimo, IdentityChannelConvergesToCenterTap) {
    auto link = quick_link();
    link.fiber.beta2_ps2_per_km = 0.0;
    link.noise = NoiseMode::Off;
    Dataset data(link, {}, 35);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 1.0);
    Rng rng(36);
    const auto base = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
    TrainConfig cfg;
    cfg.minibatch_size = 2;
    cfg.validation_size = 2;
    cfg.n_iterations = 20;
    cfg.learning_rate = 1e-3;
    const auto r = train_lumped_mimo(base, 9, cfg, data);
    ASSERT_TRUE(r.model.trailing);
    double center = 0.0, off = 0.0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 9; ++i) {
                const double e = std::norm(r.model.trailing->taps[static_cast<std::size_t>(2 * a + b)][i]);
                (i == 4 && a == b ? center : off) += e;
            }
    EXPECT_LT(off / center, 1e-4);
    EXPECT_EQ(r.model.steps[0].cd_half, base.steps[0].cd_half);
    EXPECT_THROW(train_lumped_mimo(base, 0, cfg, data), std::invalid_argument);
}

TEST(LumpedMimo, LinearChannelApproachesIdealInverse) {
    auto link = quick_link();
    link.fiber.beta2_ps2_per_km = 0.0;
    link.fiber.tau_pmd_ps_per_sqrt_km = 3.0; // large DGD so the uncompensated penalty is visible
    link.power_dbm = -10.0;
    Rng prng(37);
    const auto pmd = sample_pmd_realization(link.fiber, prng);
    Dataset data(link, pmd, 38);
    const auto plan = make_step_plan(link.fiber, 1, StepSchedule::Uniform, link.rx_rate(), 1.0);
    Rng rng(39);
    const auto base = init_model(plan, link.fiber, Parameterization::FreeDgdSu2Star, RotationInit::Identity, rng);
    const double ideal = ideal_snr_db(data, 8, [&](const DualPolSignal& v) { return ideal_pmd_inverse(v, pmd); });
    TrainConfig cfg;
    cfg.minibatch_size = 4;
    cfg.validation_size = 8;
    cfg.n_iterations = 300;
    cfg.learning_rate = 2e-2;
    auto r = train_lumped_mimo(base, 21, cfg, data);
    EXPECT_LT(r.record.initial_val_snr_db, ideal - 3.0);
    // anneal: a smaller step with larger batches removes most of the gradient-noise floor
    cfg.minibatch_size = 8;
    cfg.n_iterations = 600;
    cfg.learning_rate = 1e-3;
    const auto fine = train(r.model, cfg, data);
    EXPECT_GE(fine.final_snr_db(), ideal - 1.0) << "ideal " << ideal;
}
