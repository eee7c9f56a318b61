/// @file sobol.hpp
/// @brief 4-dimensional Sobol low-discrepancy sequence (Gray-code form).

#pragma once

#include <array>
#include <cstdint>

namespace mgpde {

/// Unscrambled Sobol points in [0,1)^4. Index 0 is the origin point; the
/// generator starts delivering from index 1, and seek(n) positions the
/// stream so the next() call returns point n+1. Fully deterministic.
class Sobol4 {
public:
    Sobol4();

    /// Jump so that the following next() returns the point with index n+1.
    void seek(std::uint64_t n);

    std::array<double, 4> next();

private:
    std::array<std::uint32_t, 4> state_{};
    std::uint64_t index_ = 0;                    // index of the point in state_
    std::array<std::array<std::uint32_t, 32>, 4> dirs_{};
};

}  // namespace mgpde
