#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ldbp/channel.hpp"
#include "ldbp/signal.hpp"

namespace ldbp {

/// Transmitter, fiber and receiver front end used to produce training pairs.
struct LinkConfig {
    FiberParams fiber;
    int forward_steps_per_span = 200;
    StepOrdering ordering = StepOrdering::AsymmetricLinearFirst;
    PulseShape tx_shape{0.01, 0, 6};
    int rx_samples_per_symbol = 2;
    double symbol_rate = 32e9;
    std::size_t n_sym = 512;
    double power_dbm = 8.0;
    NoiseMode noise = NoiseMode::On;
    bool effective_length_kerr = false;

    double tx_rate() const { return symbol_rate * tx_shape.samples_per_symbol; }
    double rx_rate() const { return symbol_rate * rx_samples_per_symbol; }
    std::size_t decimation() const {
        if (tx_shape.samples_per_symbol % rx_samples_per_symbol != 0)
            throw std::invalid_argument("LinkConfig: tx samples/symbol must be a multiple of rx samples/symbol");
        return static_cast<std::size_t>(tx_shape.samples_per_symbol / rx_samples_per_symbol);
    }
    PulseShape rx_shape() const { return {tx_shape.rolloff, tx_shape.span_symbols, rx_samples_per_symbol}; }
};

/// Received samples v (receiver rate) and the transmitted symbols s.
struct Example {
    DualPolSignal v;
    SymbolSequence s;
};

/// Shape, propagate and front-end filter one sequence. Symbols and noise draw
/// from independent child streams of `seed`.
inline Example simulate_example(const LinkConfig& link, const PmdRealization& pmd, std::uint64_t seed) {
    Rng sym_rng(derive_seed(seed, {1}));
    Example ex;
    ex.s = generate_symbols(link.n_sym, link.power_dbm, sym_rng, link.symbol_rate);
    auto tx = rrc_shape(ex.s, link.tx_shape);
    const auto plan = SsfmPlan::uniform(link.fiber, link.forward_steps_per_span, link.ordering);
    auto rx = ssfm_propagate(std::move(tx), link.fiber, pmd, plan, link.noise, Rng(derive_seed(seed, {2})),
                             SsfmOptions{link.effective_length_kerr});
    ex.v = lowpass_downsample(rx, link.rx_rate(), link.decimation());
    return ex;
}

/// Deterministic stream of examples indexed by (iteration, element), memoized.
/// Streams built with the same seed share symbols and noise across channels.
class Dataset {
public:
    static constexpr std::uint64_t kValidationTag = 0xffffffffffff0001ULL;

    Dataset(LinkConfig link, PmdRealization pmd, std::uint64_t seed)
        : link_(std::move(link)), pmd_(std::move(pmd)), seed_(seed) {}

    const LinkConfig& link() const { return link_; }
    const PmdRealization& pmd() const { return pmd_; }
    std::uint64_t seed() const { return seed_; }

    std::uint64_t example_seed(std::uint64_t iteration, std::uint64_t element) const {
        return derive_seed(seed_, {iteration, element});
    }

    const Example& get(std::uint64_t iteration, std::uint64_t element) {
        const Key k{iteration, element};
        {
            std::lock_guard lock(mutex_);
            auto it = cache_.find(k);
            if (it != cache_.end()) return *it->second;
        }
        auto ex = std::make_shared<Example>(simulate_example(link_, pmd_, example_seed(iteration, element)));
        std::lock_guard lock(mutex_);
        auto [it, inserted] = cache_.emplace(k, std::move(ex));
        return *it->second;
    }

    /// Generate elements [0, count) of an iteration, spread over `workers` threads.
    void prefetch(std::uint64_t iteration, std::size_t count, std::size_t workers = 1) {
        std::vector<std::uint64_t> todo;
        {
            std::lock_guard lock(mutex_);
            for (std::size_t e = 0; e < count; ++e)
                if (!cache_.count(Key{iteration, e})) todo.push_back(e);
        }
        if (workers <= 1 || todo.size() <= 1) {
            for (auto e : todo) get(iteration, e);
            return;
        }
        std::vector<std::thread> pool;
        const std::size_t w = std::min(workers, todo.size());
        for (std::size_t t = 0; t < w; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t i = t; i < todo.size(); i += w) get(iteration, todo[i]);
            });
        for (auto& th : pool) th.join();
    }

    /// Fixed held-out batch from a reserved tag.
    std::vector<const Example*> validation(std::size_t count, std::size_t workers = 1) {
        prefetch(kValidationTag, count, workers);
        std::vector<const Example*> out;
        for (std::size_t e = 0; e < count; ++e) out.push_back(&get(kValidationTag, e));
        return out;
    }

    std::size_t cached() const {
        std::lock_guard lock(mutex_);
        return cache_.size();
    }

    void clear() {
        std::lock_guard lock(mutex_);
        cache_.clear();
    }

    /// Write every cached example to a binary file ("LDS1", little-endian).
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + path);
        std::lock_guard lock(mutex_);
        f.write("LDS1", 4);
        put<std::uint64_t>(f, seed_);
        put<std::uint64_t>(f, cache_.size());
        for (const auto& [k, ex] : cache_) {
            put<std::uint64_t>(f, k.it);
            put<std::uint64_t>(f, k.el);
            put_stream(f, ex->v.x, ex->v.y, ex->v.sample_rate);
            put_stream(f, ex->s.sx, ex->s.sy, ex->s.symbol_rate);
        }
        if (!f) throw std::runtime_error("write failed: " + path);
    }

    /// Merge examples from a file written by save() for the same seed.
    /// Returns false when the file does not exist.
    bool load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) return false;
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "LDS1", 4) != 0) throw std::runtime_error("not a dataset file: " + path);
        if (get<std::uint64_t>(f) != seed_) throw std::runtime_error("dataset seed mismatch: " + path);
        const auto count = get<std::uint64_t>(f);
        std::lock_guard lock(mutex_);
        for (std::uint64_t i = 0; i < count; ++i) {
            Key k{get<std::uint64_t>(f), get<std::uint64_t>(f)};
            auto ex = std::make_shared<Example>();
            get_stream(f, ex->v.x, ex->v.y, ex->v.sample_rate);
            get_stream(f, ex->s.sx, ex->s.sy, ex->s.symbol_rate);
            if (!f) throw std::runtime_error("truncated dataset file: " + path);
            cache_.emplace(k, std::move(ex));
        }
        return true;
    }

private:
    template <class T>
    static void put(std::ostream& f, T v) {
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    template <class T>
    static T get(std::istream& f) {
        T v{};
        f.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    }
    static void put_stream(std::ostream& f, const std::vector<cplx>& a, const std::vector<cplx>& b, double rate) {
        put<std::uint64_t>(f, a.size());
        put<double>(f, rate);
        f.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(cplx)));
        f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(cplx)));
    }
    static void get_stream(std::istream& f, std::vector<cplx>& a, std::vector<cplx>& b, double& rate) {
        const auto n = get<std::uint64_t>(f);
        if (n > (1ULL << 32)) throw std::runtime_error("corrupt dataset file");
        rate = get<double>(f);
        a.resize(n);
        b.resize(n);
        f.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(cplx)));
        f.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n * sizeof(cplx)));
    }

    struct Key {
        std::uint64_t it, el;
        bool operator<(const Key& o) const { return it != o.it ? it < o.it : el < o.el; }
    };
    LinkConfig link_;
    PmdRealization pmd_;
    std::uint64_t seed_;
    mutable std::mutex mutex_;
    std::map<Key, std::shared_ptr<Example>> cache_;
};

} // namespace ldbp
