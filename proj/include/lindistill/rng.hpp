#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace lindistill {

// Deterministic RNG with explicit algorithms so that identical seeds give
// bit-identical streams within one build. splitmix64 core, 53-bit uniforms,
// Box-Muller normals with a cached spare.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        // xorshift-multiply (splitmix64); small state, good mixing.
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of randomness.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    // Inclusive range [lo, hi].
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Box-Muller with a cached spare.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        constexpr double two_pi = 6.283185307179586;
        const double u = 1.0 - uniform01(); // (0, 1], keeps log finite
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = two_pi * uniform01();
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent substream (data, mask, probe, ...) from this seed.
    Rng fork(std::uint64_t stream) const {
        Rng r(seed_ ^ (0xA5A5A5A5DEADBEEFull + stream * 0x9E3779B97F4A7C15ull));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace lindistill
