#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace layton {

// Deterministic RNG wrapper. Gaussian sampling is hand-rolled (Box-Muller on
// explicit doubles) so streams are bit-stable across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        // 53 random bits -> double in [0,1)
        return double(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int(engine_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Independent child stream, e.g. one per sample index.
    Rng child(uint64_t salt) const {
        uint64_t s = seed_mix_ ^ (salt + 0x9e3779b97f4a7c15ULL + (seed_mix_ << 6) + (seed_mix_ >> 2));
        return Rng(splitmix(s));
    }

    static Rng seeded(uint64_t seed) {
        Rng r(splitmix(seed));
        r.seed_mix_ = splitmix(seed ^ 0xa5a5a5a5a5a5a5a5ULL);
        return r;
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    uint64_t seed_mix_ = 0x243f6a8885a308d3ULL;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace layton
