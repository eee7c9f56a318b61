/// @file field_io.hpp
/// @brief "MGPD" field files and the omega dataset manifest.
///
/// Field file layout: 4-byte magic "MGPD", little-endian u32 header length,
/// JSON header {version, kind, rank, resolution, omega?, seed?, dtype:"f64le"},
/// then the row-major little-endian f64 payload. Round-trips are bit-exact.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mgpde/problem.hpp"
#include "mgpde/tensor.hpp"

namespace mgpde {

struct FieldHeader {
    int version = 1;
    std::string kind;  // "nu" | "u" | "diff"
    int rank = 2;
    std::int64_t resolution = 0;
    std::optional<OmegaSample> omega;
    std::optional<std::uint64_t> seed;
};

void write_field(const std::string& path, const FieldHeader& header, const Tensor& field);

struct FieldFile {
    FieldHeader header;
    Tensor field;  // shape (1,1,[N,]N,N)
};

FieldFile read_field(const std::string& path);

/// Dataset manifest: JSON lines, one omega per line with its seed and index.
void write_manifest(const std::string& path, std::uint64_t seed,
                    const std::vector<OmegaSample>& omegas);

struct ManifestEntry {
    std::int64_t index;
    std::uint64_t seed;
    OmegaSample omega;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace mgpde
