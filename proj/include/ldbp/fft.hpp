#pragma once

#include <fftw3.h>

#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <vector>

#include "ldbp/units.hpp"

namespace ldbp::fft {

namespace detail {

struct PlanPair {
    fftw_plan forward = nullptr;
    fftw_plan backward = nullptr;
    fftw_plan forward_unaligned = nullptr;
    fftw_plan backward_unaligned = nullptr;
};

// FFTW_ESTIMATE plans are deterministic across runs; FFTW_MEASURE is not.
class PlanCache {
public:
    static PlanCache& instance() {
        static PlanCache cache;
        return cache;
    }

    PlanPair get(std::size_t n) {
        std::lock_guard lock(mutex_);
        auto it = plans_.find(n);
        if (it != plans_.end()) return it->second;
        std::vector<cplx> a(n), b(n);
        auto* pa = reinterpret_cast<fftw_complex*>(a.data());
        auto* pb = reinterpret_cast<fftw_complex*>(b.data());
        const int nn = static_cast<int>(n);
        PlanPair p;
        p.forward = fftw_plan_dft_1d(nn, pa, pb, FFTW_FORWARD, FFTW_ESTIMATE);
        p.backward = fftw_plan_dft_1d(nn, pa, pb, FFTW_BACKWARD, FFTW_ESTIMATE);
        p.forward_unaligned = fftw_plan_dft_1d(nn, pa, pb, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        p.backward_unaligned = fftw_plan_dft_1d(nn, pa, pb, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (!p.forward || !p.backward || !p.forward_unaligned || !p.backward_unaligned)
            throw std::runtime_error("fftw planning failed");
        plans_.emplace(n, p);
        return p;
    }

    PlanCache(const PlanCache&) = delete;
    PlanCache& operator=(const PlanCache&) = delete;

private:
    PlanCache() = default;
    ~PlanCache() {
        for (auto& [n, p] : plans_) {
            fftw_destroy_plan(p.forward);
            fftw_destroy_plan(p.backward);
            fftw_destroy_plan(p.forward_unaligned);
            fftw_destroy_plan(p.backward_unaligned);
        }
    }

    std::mutex mutex_;
    std::map<std::size_t, PlanPair> plans_;
};

inline fftw_complex* as_fftw(cplx* p) { return reinterpret_cast<fftw_complex*>(p); }

// SIMD plans need both buffers at the planning alignment; fall back otherwise.
inline void execute(const PlanPair& p, bool fwd, cplx* in, cplx* out) {
    const bool aligned = fftw_alignment_of(reinterpret_cast<double*>(in)) == 0 &&
                         fftw_alignment_of(reinterpret_cast<double*>(out)) == 0;
    fftw_plan plan = fwd ? (aligned ? p.forward : p.forward_unaligned) : (aligned ? p.backward : p.backward_unaligned);
    fftw_execute_dft(plan, as_fftw(in), as_fftw(out));
}

} // namespace detail

/// Unnormalized forward DFT, X[k] = sum_n x[n] exp(-j 2 pi k n / N).
inline std::vector<cplx> forward(std::span<const cplx> x) {
    std::vector<cplx> in(x.begin(), x.end()), out(x.size());
    if (x.empty()) return out;
    auto p = detail::PlanCache::instance().get(x.size());
    detail::execute(p, true, in.data(), out.data());
    return out;
}

/// Inverse DFT including the 1/N factor.
inline std::vector<cplx> inverse(std::span<const cplx> x) {
    std::vector<cplx> in(x.begin(), x.end()), out(x.size());
    if (x.empty()) return out;
    auto p = detail::PlanCache::instance().get(x.size());
    detail::execute(p, false, in.data(), out.data());
    const double scale = 1.0 / static_cast<double>(x.size());
    for (auto& v : out) v *= scale;
    return out;
}

/// In-place variants used on hot paths (the SSFM inner loop).
inline void forward_inplace(std::vector<cplx>& x, std::vector<cplx>& scratch) {
    if (x.empty()) return;
    scratch.resize(x.size());
    auto p = detail::PlanCache::instance().get(x.size());
    detail::execute(p, true, x.data(), scratch.data());
    x.swap(scratch);
}

inline void inverse_inplace(std::vector<cplx>& x, std::vector<cplx>& scratch) {
    if (x.empty()) return;
    scratch.resize(x.size());
    auto p = detail::PlanCache::instance().get(x.size());
    detail::execute(p, false, x.data(), scratch.data());
    x.swap(scratch);
    const double scale = 1.0 / static_cast<double>(x.size());
    for (auto& v : x) v *= scale;
}

/// Inverse DFT without the 1/N factor (callers fold it into a response).
inline void inverse_unscaled_inplace(std::vector<cplx>& x, std::vector<cplx>& scratch) {
    if (x.empty()) return;
    scratch.resize(x.size());
    auto p = detail::PlanCache::instance().get(x.size());
    detail::execute(p, false, x.data(), scratch.data());
    x.swap(scratch);
}

/// Signed DFT bin frequency (Hz) for bin k of an n-point transform at rate fs.
inline double bin_frequency(std::size_t k, std::size_t n, double fs) {
    const auto kk = static_cast<long long>(k);
    const auto nn = static_cast<long long>(n);
    const long long s = (kk < (nn + 1) / 2) ? kk : kk - nn;
    return static_cast<double>(s) * fs / static_cast<double>(n);
}

/// Angular frequency grid in rad/s, FFT bin order.
inline std::vector<double> omega_grid(std::size_t n, double fs) {
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = 2.0 * kPi * bin_frequency(k, n, fs);
    return w;
}

} // namespace ldbp::fft
