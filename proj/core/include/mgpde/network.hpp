/// @file network.hpp
/// @brief Resolution-agnostic fully convolutional U-Net.
///
/// Encoder: depth blocks of (conv k3, batch norm, leaky ReLU), each followed
/// by a factor-2 mean-pool; the block outputs are kept as skip connections.
/// Decoder: per level a stride-2 transpose convolution (kernel 2, the exact
/// adjoint upsample), channel concatenation with the skip, and a fusing conv
/// block. The head conv maps to one channel through a sigmoid and carries no
/// batch norm. Channel widths start at base_filters and double per level.
///
/// Architectural adaptation replaces the finest stride-2 transpose conv with
/// (conv, stride-2 transpose conv, stride-1 transpose conv), keeping every
/// retained weight bit-exact; the replacement preserves output shapes, so a
/// model can be adapted repeatedly.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mgpde/tensor.hpp"
#include "mgpde/tensor_ops.hpp"

namespace mgpde {

struct UNetSpec {
    int depth = 3;
    int base_filters = 16;
    int spatial_rank = 2;
    double leaky_slope = 0.01;
    int kernel_size = 3;

    void validate() const;
    std::int64_t min_resolution() const { return std::int64_t{1} << depth; }
    bool operator==(const UNetSpec&) const = default;
};

/// One conv or transpose-conv layer plus its optional batch norm + activation.
struct ConvBlock {
    bool transpose = false;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    bool has_bn = true;
    bool has_act = true;

    Tensor weight;
    Tensor bias;
    Tensor gamma;  // defined iff has_bn
    Tensor beta;
    BNState bn;
};

struct ModelState {
    UNetSpec spec;
    std::vector<std::uint64_t> adaptation_history;  // init seeds of each adapt

    std::vector<ConvBlock> encoder;           // depth blocks
    std::vector<std::vector<ConvBlock>> up;   // per level (0 = finest); grows by adapt
    std::vector<ConvBlock> fuse;              // per level
    ConvBlock head;

    /// Hash of the architecture (spec + adaptation history), not the weights.
    std::string fingerprint() const;

    /// Trainable parameter count (weights, biases, BN gamma/beta).
    std::int64_t parameter_count() const;

    /// Parameters in declaration order: encoder blocks, decoder levels from
    /// coarsest to finest (up chain then fuse), head. Stable across calls.
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;

    /// BN running statistics in the same declaration order.
    std::vector<BNState*> bn_states();
    std::vector<const BNState*> bn_states() const;

    /// Flatten parameters into / from a contiguous buffer (optimizer order).
    std::vector<double> flatten_parameters() const;
    void unflatten_parameters(const std::vector<double>& flat);

    /// SHA-256 over parameter and BN-stat bytes; replica coherence checks.
    std::string weights_digest() const;

    ModelState clone() const;
};

/// Deterministic build: Kaiming-uniform (fan-in) conv weights, zero biases,
/// gamma = 1, beta = 0. Same seed gives a bit-identical state.
ModelState build_unet(const UNetSpec& spec, std::uint64_t seed);

/// Deepen the decoder as described in the file header. Retained layers keep
/// their weights bit-exactly; the new layers are initialized from the seed.
ModelState adapt_unet(const ModelState& state, std::uint64_t seed);

/// Run the network on a (B,1,N,..,N) batch. N must be a power of two and at
/// least 2^depth, equal on every spatial axis. Output has the input shape and
/// values in (0,1). When `sync` is set, training-mode batch-norm statistics
/// are averaged across workers.
Tensor unet_forward(ModelState& state, const Tensor& nu_batch, bool training, Tape* tape = nullptr,
                    const StatReducer* sync = nullptr);

/// Checkpoint: "MGCK" magic, JSON header (spec, fingerprint, adaptation
/// history), then little-endian f64 parameters in declaration order followed
/// by BN running statistics.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

constexpr double kBatchNormMomentum = 0.1;

}  // namespace mgpde
