#include "mgpde/sobol.hpp"

#include <bit>

namespace mgpde {

namespace {

// Primitive polynomial data for dimensions 2..4 (dimension 1 is the van der
// Corput sequence). Classic Joe-Kuo table entries: degree s, coefficient a,
// initial m values.
struct PolyInit {
    int s;
    std::uint32_t a;
    std::uint32_t m[3];
};

constexpr PolyInit kPoly[3] = {
    {1, 0, {1, 0, 0}},
    {2, 1, {1, 3, 0}},
    {3, 1, {1, 3, 1}},
};

constexpr int kBits = 32;

}  // namespace

Sobol4::Sobol4() {
    // Dimension 1: m_k = 1 for all k.
    for (int k = 0; k < kBits; ++k) dirs_[0][static_cast<std::size_t>(k)] = 1u << (kBits - 1 - k);

    for (int d = 1; d < 4; ++d) {
        const PolyInit& p = kPoly[d - 1];
        std::uint32_t m[kBits];
        for (int k = 0; k < p.s; ++k) m[k] = p.m[k];
        for (int k = p.s; k < kBits; ++k) {
            std::uint32_t v = (m[k - p.s] << p.s) ^ m[k - p.s];
            for (int i = 1; i < p.s; ++i) {
                if ((p.a >> (p.s - 1 - i)) & 1u) v ^= m[k - i] << i;
            }
            m[k] = v;
        }
        for (int k = 0; k < kBits; ++k)
            dirs_[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)] = m[k]
                                                                              << (kBits - 1 - k);
    }
}

void Sobol4::seek(std::uint64_t n) {
    // Gray-code identity: state at index n is the XOR of direction numbers
    // selected by the bits of n ^ (n >> 1).
    std::uint64_t gray = n ^ (n >> 1);
    for (int d = 0; d < 4; ++d) {
        std::uint32_t x = 0;
        for (int k = 0; k < kBits; ++k) {
            if ((gray >> k) & 1u) x ^= dirs_[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
        }
        state_[static_cast<std::size_t>(d)] = x;
    }
    index_ = n;
}

std::array<double, 4> Sobol4::next() {
    // Advance to index_+1: flip the direction number of the lowest zero bit.
    int k = std::countr_one(index_);
    for (int d = 0; d < 4; ++d)
        state_[static_cast<std::size_t>(d)] ^=
            dirs_[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
    ++index_;
    std::array<double, 4> out;
    for (int d = 0; d < 4; ++d)
        out[static_cast<std::size_t>(d)] =
            static_cast<double>(state_[static_cast<std::size_t>(d)]) * 0x1.0p-32;
    return out;
}

}  // namespace mgpde
