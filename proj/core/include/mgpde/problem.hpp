/// @file problem.hpp
/// @brief Parametric Poisson problem: diffusivity maps, parameter sampling,
///        exact boundary masking, and the variational energy loss.
///
/// The PDE is -div(nu grad u) = 0 on the unit square/cube with u = 1 on the
/// x=0 face, u = 0 on the x=1 face, and zero normal flux elsewhere. Nodal
/// fields live on N = 2^k nodes per axis with spacing h = 1/(N-1); the energy
/// is integrated over the (N-1)^rank multilinear elements with a 2-point
/// Gauss rule per axis.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mgpde/tensor.hpp"

namespace mgpde {

using OmegaSample = std::array<double, 4>;

/// Fixed constants of the log-permeability expansion.
struct ProblemConstants {
    static constexpr int m = 4;
    static constexpr std::array<double, 4> a{1.72, 4.05, 6.85, 9.82};
    static constexpr double omega_min = -3.0;
    static constexpr double omega_max = 3.0;

    /// lambda_i = 1 / (1 + 0.25 a_i^2); strictly decreasing, all in (0,1].
    static std::array<double, 4> lambda();
};

struct GridSpec {
    std::int64_t resolution = 0;  // nodes per axis; training grids use powers of two
    int rank = 2;                 // 2 or 3

    double spacing() const { return 1.0 / static_cast<double>(resolution - 1); }
    std::int64_t nodes_per_axis() const { return resolution; }
    std::int64_t node_count() const;
    std::int64_t element_count() const;
    void validate() const;

    bool operator==(const GridSpec&) const = default;
};

/// Indicator fields for exact Dirichlet masking, shaped (1,1,[N,]N,N).
/// chi_int + chi_b == 1 everywhere; u_bc is nonzero only where chi_b == 1.
struct BoundaryMasks {
    GridSpec grid;
    Tensor chi_int;
    Tensor chi_b;
    Tensor u_bc;

    static BoundaryMasks make(const GridSpec& grid);
};

/// Nodal diffusivity nu(x; omega) = exp(sum_i omega_i lambda_i xi_i(x) eta_i(y) [zeta_i(z)])
/// with xi_i(t) = (a_i/2) cos(a_i t) + sin(a_i t) and the same functional form
/// per axis. Output shape (1,1,[N,]N,N); strictly positive.
/// Throws if omega lies outside [-3,3]^4.
Tensor diffusivity_field(const OmegaSample& omega, const GridSpec& grid);

/// Scalar evaluation of the diffusivity at one point (used by the CLI and tests).
double diffusivity_at(const OmegaSample& omega, const GridSpec& grid, double x, double y,
                      double z = 0.0);

/// Deterministic Sobol draw of `count` parameters mapped affinely to [-3,3]^4.
/// The seed offsets the start index of the sequence; the origin point is
/// always skipped. Same (count, seed) gives an identical list.
std::vector<OmegaSample> sample_omegas(std::int64_t count, std::uint64_t seed);

/// u = u_int * chi_int + u_bc * chi_b, batch-broadcast across (B,1,...).
/// Differentiable w.r.t. u_int; the gradient is exactly chi_int.
Tensor apply_bc(const Tensor& u_int, const BoundaryMasks& masks, Tape* tape = nullptr);

/// Variational energy J(u) = 1/2 int nu |grad u|^2 dx - int f u dx evaluated
/// element-wise with 2-point Gauss quadrature; nu is interpolated to the
/// quadrature points with the element shape functions. Returns the mean over
/// the batch; differentiable w.r.t. u (nu is treated as data).
/// `forcing` is an optional nodal f field (defaults to f == 0).
Tensor energy_loss(const Tensor& u, const Tensor& nu, const GridSpec& grid, Tape* tape = nullptr,
                   const Tensor* forcing = nullptr);

/// Per-sample energies (reporting path, no gradient tracking).
std::vector<double> energy_per_sample(const Tensor& u, const Tensor& nu, const GridSpec& grid,
                                      const Tensor* forcing = nullptr);

/// Multilinear interpolation between node grids on the unit domain.
/// Exact for fields that are multilinear on each source cell.
Tensor resample_field(const Tensor& field, const GridSpec& from, const GridSpec& to);

}  // namespace mgpde
