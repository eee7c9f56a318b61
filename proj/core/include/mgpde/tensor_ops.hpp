/// @file tensor_ops.hpp
/// @brief Differentiable tensor operations used by the network and loss.
///
/// Every op validates shapes, computes its output, and (when a tape is given
/// and at least one input is attached) records a backward closure. Ops are
/// pure: repeated calls on the same inputs are bit-identical.

#pragma once

#include "mgpde/tensor.hpp"

namespace mgpde {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double c, Tape* tape = nullptr);

// ---- activations ----
Tensor leaky_relu(const Tensor& x, double slope, Tape* tape = nullptr);
Tensor sigmoid(const Tensor& x, Tape* tape = nullptr);

// ---- reductions ----
Tensor sum(const Tensor& x, Tape* tape = nullptr);
Tensor mean(const Tensor& x, Tape* tape = nullptr);

// ---- structural ----
enum class PoolMode { Max, Mean };

/// Halve every spatial axis of a (B,C,H,W) or (B,C,D,H,W) tensor.
/// Requires even spatial extents.
Tensor downsample2(const Tensor& x, PoolMode mode, Tape* tape = nullptr);

/// Concatenate along the channel axis; all other extents must match.
Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// ---- convolution ----

/// Backend selection for conv/conv_transpose. Correctness tests pin Naive;
/// Auto picks im2col for 2-D inputs and the direct loops for 3-D.
enum class ConvBackend { Auto, Naive, Im2col };
void set_conv_backend(ConvBackend backend);
ConvBackend conv_backend();

/// Intra-op thread count (the N_t hint). Splits work over samples/rows only;
/// per-element summation order is unchanged, so numerics are unaffected.
void set_intra_op_threads(int n);
int intra_op_threads();

/// Cross-correlation convolution.
/// input (B,Cin,spatial...), kernel (Cout,Cin,k...), bias (Cout).
/// Output spatial extent: floor((in + 2*padding - k)/stride) + 1.
Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
            int padding, Tape* tape = nullptr);

/// Adjoint of conv with the same (kernel size, stride, padding).
/// input (B,Cin,spatial...), kernel (Cin,Cout,k...), bias (Cout).
/// Output spatial extent: (in - 1)*stride - 2*padding + k. Stride must be 1 or 2.
Tensor conv_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding, Tape* tape = nullptr);

// ---- batch normalization ----

/// Per-channel running statistics carried by a model between passes.
struct BNState {
    Tensor running_mean;
    Tensor running_var;

    static BNState make(std::int64_t channels) {
        return BNState{Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
    }
};

/// Batch normalization with epsilon 1e-5.
/// Training mode normalizes by batch statistics over (batch x spatial) and
/// updates running stats as r <- (1-momentum)*r + momentum*batch_stat.
/// Eval mode normalizes by the running statistics.
/// When `sync` is given (data-parallel training), the batch moments and the
/// backward reduction terms are averaged across workers so the result equals
/// a single-worker run over the union mini-batch.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BNState& state,
                 bool training, double momentum, Tape* tape = nullptr,
                 const StatReducer* sync = nullptr);

constexpr double kBatchNormEps = 1e-5;

// ---- helpers ----

/// Deterministic chunked parallel-for; fn(chunk_begin, chunk_end).
/// Chunk assignment never changes per-element arithmetic order.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace mgpde
