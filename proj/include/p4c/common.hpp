#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace p4c {

// Invalid configuration values (bad sigma, zero primitives, unknown keys, ...).
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an operation's contract (non-unit feature rows, shape
// mismatch, degenerate pairs, ...).
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded random stream. All draws go through explicit, fixed algorithms
/// (never the implementation-defined std distributions) so that a seed
/// pins the realized values across platforms and library versions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    /// Child stream with an independent state, stable in (seed, tag).
    Rng child(std::uint64_t tag) const {
        return Rng(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1))));
    }

    std::uint64_t bits() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform index in [0, n).
    std::size_t index(std::size_t n) {
        return std::size_t((__uint128_t(gen_()) * n) >> 64);
    }

    /// k distinct indices from [0, n), partial Fisher-Yates order.
    std::vector<int> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<int> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = int(i);
        std::vector<int> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + index(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

  private:
    std::mt19937_64 gen_;
    std::uint64_t seed_;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

namespace io {

// Little-endian scalar IO. The build targets little-endian hosts; the
// static_assert keeps the byte-copy honest.
static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

template <typename T>
void write_le(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw contract_error("unexpected end of stream");
    return v;
}

inline void write_magic(std::ostream& os, const char magic[9]) { os.write(magic, 8); }

inline void expect_magic(std::istream& is, const char magic[9]) {
    char buf[8];
    is.read(buf, 8);
    if (!is || std::string(buf, 8) != std::string(magic, 8))
        throw contract_error(std::string("bad magic, expected ") + magic);
}

}  // namespace io

}  // namespace p4c
