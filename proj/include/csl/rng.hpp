#ifndef CSL_RNG_HPP
#define CSL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <vector>

namespace csl {

// Deterministic PRNG used for every random decision in the library.
//
// Algorithm: xoshiro256** (Blackman/Vigna), state seeded by splitmix64.
// All derived quantities (uniforms, normals, shuffles) are built on top of
// next_u64() with the exact formulas below, so a (seed, call sequence) pair
// reproduces bit-identically on any platform with IEEE-754 doubles. We do not
// use std::uniform_real_distribution and friends because their output is not
// specified across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; no caching so the call sequence stays
    // a pure function of the draw count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream for a named purpose; keeps per-component draw
    // sequences decoupled from each other.
    Rng derive(std::uint64_t stream_tag) const {
        std::uint64_t x = state_[0] ^ rotl(state_[3], 13) ^ (stream_tag * 0x9e3779b97f4a7c15ULL);
        return Rng(splitmix64(x));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_[4];
};

}  // namespace csl

#endif
