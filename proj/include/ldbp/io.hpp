#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "ldbp/signal.hpp"

namespace ldbp {

static_assert(std::endian::native == std::endian::little, "DPS1 files are written with native little-endian layout");

/// Waveform dump: "DPS1", u32 length, f64 sample rate, then per sample
/// f64 re_x, im_x, re_y, im_y.
inline void write_dps1(const DualPolSignal& sig, const std::string& path) {
    sig.validate();
    if (sig.size() > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("write_dps1: signal too long");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("DPS1", 4);
    const auto n = static_cast<std::uint32_t>(sig.size());
    f.write(reinterpret_cast<const char*>(&n), sizeof n);
    f.write(reinterpret_cast<const char*>(&sig.sample_rate), sizeof(double));
    for (std::size_t i = 0; i < sig.size(); ++i) {
        const double v[4] = {sig.x[i].real(), sig.x[i].imag(), sig.y[i].real(), sig.y[i].imag()};
        f.write(reinterpret_cast<const char*>(v), sizeof v);
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline DualPolSignal read_dps1(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DPS1", 4) != 0) throw std::runtime_error("not a DPS1 file: " + path);
    std::uint32_t n = 0;
    double fs = 0.0;
    f.read(reinterpret_cast<char*>(&n), sizeof n);
    f.read(reinterpret_cast<char*>(&fs), sizeof fs);
    DualPolSignal sig;
    sig.sample_rate = fs;
    sig.x.resize(n);
    sig.y.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        double v[4];
        f.read(reinterpret_cast<char*>(v), sizeof v);
        sig.x[i] = {v[0], v[1]};
        sig.y[i] = {v[2], v[3]};
    }
    if (!f) throw std::runtime_error("truncated DPS1 file: " + path);
    sig.validate();
    return sig;
}

} // namespace ldbp
