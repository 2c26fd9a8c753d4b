#pragma once

#include <cmath>
#include <cstdint>

namespace chainflow {

// Counter-free splitmix64-seeded xoshiro256++ generator. We roll our own
// uniform/gaussian transforms instead of <random> distributions so that
// streams are bit-identical across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            si = z ^ (z >> 31);
        }
        cached_gauss_valid_ = false;
    }

    // Derive an independent stream, e.g. per (sample, step).
    static Rng derive(uint64_t seed, uint64_t a, uint64_t b = 0) {
        return Rng(seed * 0x9e3779b97f4a7c15ull + a * 0xd1342543de82ef95ull + b + 1);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (pairs cached).
    double gaussian() {
        if (cached_gauss_valid_) {
            cached_gauss_valid_ = false;
            return cached_gauss_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        cached_gauss_ = r * std::sin(theta);
        cached_gauss_valid_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double cached_gauss_ = 0.0;
    bool cached_gauss_valid_ = false;
};

}  // namespace chainflow
