#pragma once

#include <cmath>
#include <cstdint>

namespace ctrldiff {

// Deterministic splitmix64 generator with Box-Muller normals.
// <random> distributions are implementation-defined, which breaks the
// bit-reproducibility contract, so draws are generated here instead.
// Rng::indexed(seed, i) derives an independent stream per index, which keeps
// per-sample data generation order-free and shuffle-safe.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds (0, 1, 2, ...)
        next_u64();
    }

    static Rng indexed(uint64_t seed, uint64_t index) {
        Rng r(seed);
        uint64_t mixed = r.next_u64() ^ (index * 0x9E3779B97F4A7C15ull);
        return Rng(mixed);
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // standard normal via Box-Muller; second value of each pair is cached
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace ctrldiff
