#pragma once

#include <cmath>
#include <cstdint>

namespace seqlab {

// Deterministic counter-style PRNG (splitmix64). std::mt19937 with the
// standard distributions is implementation-defined across toolchains, so
// streams derived from (seed, index) are generated with a fixed algorithm.
struct Rng {
    uint64_t state = 0;

    explicit Rng(uint64_t seed) : state(seed) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Collapses a list of stream identifiers into one seed.
    static uint64_t combine(std::initializer_list<uint64_t> parts) {
        uint64_t h = 0x243f6a8885a308d3ull;
        for (uint64_t p : parts) h = mix(h ^ (p + 0x9e3779b97f4a7c15ull));
        return h;
    }

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Unbiased bounded draw (rejection on the top range).
    uint64_t next_below(uint64_t bound) {
        uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    double next_double() {  // [0, 1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_normal() {  // Box-Muller, one value per call pair kept simple
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }
};

}  // namespace seqlab
