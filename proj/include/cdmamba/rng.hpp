#pragma once

#include <cmath>
#include <cstdint>

namespace cdmamba {

// Deterministic RNG. std::mt19937_64 for the stream, hand-rolled distributions
// so that draws are bit-identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

    std::uint64_t next_u64() {
        // xorshift64* — small, fast, adequate for data/init streams
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1Dull;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // independent stream for a derived index (per-tile seeds etc.)
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
        return splitmix(seed ^ (0x9E3779B97F4A7C15ull * (index + 1)));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        x = x ^ (x >> 31);
        return x ? x : 0x1234567887654321ull;
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace cdmamba
