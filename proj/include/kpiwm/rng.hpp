#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "kpiwm/common.hpp"

namespace kpiwm {

// Deterministic, platform-independent RNG. std:: distributions are
// implementation-defined, so normals come from an explicit Box-Muller on a
// splitmix64 stream. Streams are derived by hashing (seed, tag...) so any
// unit of work can draw from its own counter-based stream regardless of
// scheduling order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ GOLDEN) {}

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + GOLDEN + b * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::uint64_t s = seed;
        for (std::uint64_t t : tags) s = mix(s, t);
        return Rng(s);
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += GOLDEN);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // One standard normal per call (two fresh uniforms, no cached state).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    Vec normal_vec(std::size_t n, double mean = 0.0, double std = 1.0) {
        Vec v(n);
        for (auto& x : v) x = normal(mean, std);
        return v;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) { return next_u64() % n; }

    // Fisher-Yates using this stream; deterministic given seed.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static constexpr std::uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL;
    std::uint64_t state_;
};

} // namespace kpiwm
