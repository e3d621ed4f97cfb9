#pragma once

#include <cstdint>

namespace qkv {

// SplitMix64 (Steele, Lea, Flood 2014). The state advances by the golden
// gamma 0x9E3779B97F4A7C15 and each output is the state passed through the
// finalizer below. Only integer arithmetic is involved, so every platform
// produces the same stream for the same seed.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class SplitMix64 {
public:
    static constexpr std::uint64_t golden_gamma = 0x9E3779B97F4A7C15ULL;

    explicit constexpr SplitMix64(std::uint64_t seed) : state_(seed) {}

    constexpr std::uint64_t next() {
        state_ += golden_gamma;
        return splitmix64_mix(state_);
    }

    // Uniform on [0, 1) with 53 random bits; exact in binary64.
    constexpr double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    constexpr double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Zero-mean, unit-variance draw: sum of twelve uniforms minus six
    // (Irwin-Hall). Built from additions of exactly representable values only,
    // so it is bit-reproducible without relying on libm.
    constexpr double standard_normal() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += uniform();
        return s - 6.0;
    }

    // Uniform integer in [0, bound). Modulo bias is below 2^-40 for the
    // bounds used here.
    constexpr std::uint64_t below(std::uint64_t bound) { return next() % bound; }

private:
    std::uint64_t state_;
};

// Derive an independent stream seed from a parent seed and a label.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label) {
    return splitmix64_mix(seed ^ splitmix64_mix(label + SplitMix64::golden_gamma));
}

}  // namespace qkv
