#pragma once

#include <cstdint>

namespace dern {

// splitmix64 stream with a Box-Muller gaussian on top. Self-contained so the
// same seed gives identical bits on every platform and standard library.
class rng {
public:
    explicit rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n >= 1
    uint64_t below(uint64_t n) {
        // rejection sampling over the top of the range to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    double gaussian();

    float gaussian_f() { return float(gaussian()); }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// mix a sub-stream id into a seed (layer index, expert index, ...)
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    rng r(seed ^ (0x7f4a7c15ULL + stream * 0x9e3779b97f4a7c15ULL));
    return r.next_u64();
}

// calibration draws live on even seeds, probe draws on odd seeds, so the two
// sets stay disjoint for any user-facing seed value
inline uint64_t calibration_seed(uint64_t user_seed) { return 2 * user_seed; }
inline uint64_t probe_seed(uint64_t user_seed) { return 2 * user_seed + 1; }

} // namespace dern
