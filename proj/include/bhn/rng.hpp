#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace bhn {

/// Deterministic random stream. Normal variates use Box-Muller on two
/// uniforms per call so the draw sequence is fixed by the engine state
/// alone (std::normal_distribution caches internally, which would make
/// per-call-site behaviour depend on distribution object lifetime).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::mt19937::result_type>(seed)) {}

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_unit();
    }

    double normal(double mean, double std) {
        double u1 = next_unit();
        double u2 = next_unit();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + std * r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> dist(lo, hi);
        return dist(engine_);
    }

    bool bernoulli(double p) { return next_unit() < p; }

    std::mt19937& engine() { return engine_; }

private:
    double next_unit() {
        // 53-bit uniform in [0, 1)
        std::uint64_t hi = engine_() >> 5;  // 27 bits
        std::uint64_t lo = engine_() >> 6;  // 26 bits
        return (static_cast<double>(hi) * 67108864.0 + static_cast<double>(lo)) *
               (1.0 / 9007199254740992.0);
    }

    std::mt19937 engine_;
};

/// Stable sub-seed derivation: one master seed fans out to named streams
/// (init, shuffle, noise, ...) so adding a consumer never shifts another
/// stream's draws.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& stream) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    // splitmix64 finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

}  // namespace bhn
