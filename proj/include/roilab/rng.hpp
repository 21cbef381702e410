#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace roilab {

// splitmix64 stream. Bit-exact for a given seed on every platform, which is
// what the reproducibility contract of datasets/checkpoints rests on; the
// standard <random> distributions are implementation-defined and unusable here.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, n), multiply-shift; n > 0
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller, one draw per call
    double next_normal() {
        double u1;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

private:
    uint64_t state_;
};

// Stable derived seed for an independent stream (per sample, per epoch, ...).
inline uint64_t mix_seed(uint64_t root, uint64_t stream) {
    Rng r(root ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
    return r.next_u64();
}

// Fisher-Yates with the splitmix engine; std::shuffle is not portable.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace roilab
