#pragma once

#include <cmath>
#include <cstdint>

namespace anf {

/// Counter-based 64-bit PRNG used for every stochastic path in the toolkit.
///
/// Each draw is a pure function of (seed, stream, counter): the counter is
/// pushed through the SplitMix64 finalizer with a key derived from seed and
/// stream. Streams let independent consumers (weight init, per-sample noise,
/// shuffles) share one run seed without coordinating counters, and the
/// mapping is identical on every platform.
class Rng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix(seed + kGolden * mix(stream + kGolden))) {}

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    /// Standard normal via Box-Muller; always consumes exactly two draws.
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(6.283185307179586477 * u2);
    }

    double next_normal(double mean, double stddev) {
        return mean + stddev * next_normal();
    }

    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace anf
