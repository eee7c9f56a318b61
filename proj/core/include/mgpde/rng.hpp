/// @file rng.hpp
/// @brief Seeded RNG with a platform-independent uniform mapping.
///
/// std::mt19937_64 is bit-exact across implementations but the standard
/// distributions are not, so the [0,1) mapping is done by hand.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mgpde {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of entropy.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace mgpde
