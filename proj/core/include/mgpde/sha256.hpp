/// @file sha256.hpp
/// @brief Minimal SHA-256 used for model fingerprints and replica coherence checks.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace mgpde {

class Sha256 {
public:
    Sha256();

    void update(const void* data, std::size_t len);
    std::array<std::uint8_t, 32> finish();

    /// One-shot convenience: lowercase hex digest of a byte buffer.
    static std::string hex(const void* data, std::size_t len);
    static std::string hex(const std::string& s) { return hex(s.data(), s.size()); }

private:
    void process_block(const std::uint8_t* block);

    std::array<std::uint32_t, 8> state_;
    std::uint64_t total_len_ = 0;
    std::array<std::uint8_t, 64> buffer_{};
    std::size_t buffer_len_ = 0;
};

}  // namespace mgpde
