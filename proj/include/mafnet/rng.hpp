#pragma once

// Deterministic random source. mt19937_64 output is fully specified by the
// standard, and the uniform/normal mappings below are explicit, so streams
// are reproducible across platforms. Sub-streams are derived by hashing a
// key tuple, which keeps per-sample augmentation independent of processing
// order.

#include <cmath>
#include <cstdint>
#include <random>

namespace mafnet {

inline uint64_t mix_key(uint64_t h, uint64_t v) {
    // splitmix64 finalizer over a running combination
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    uint64_t z = h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), base_seed_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] via rejection-free modulo over a wide range;
    // bias is negligible for the small ranges used here but we reject anyway
    // to keep the stream exactly uniform.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % range);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one value per draw, the spare is kept.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename... Keys>
    Rng fork(Keys... keys) const {
        uint64_t h = base_seed_;
        ((h = mix_key(h, static_cast<uint64_t>(keys))), ...);
        return Rng(h);
    }

private:
    std::mt19937_64 engine_;
    uint64_t base_seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mafnet
