/// @file fem.hpp
/// @brief Ground-truth finite element solver for the variable-coefficient
///        Poisson problem: stiffness assembly plus conjugate gradients.
///
/// The assembly uses the same multilinear elements and 2-point Gauss rule as
/// the energy loss, so u'Ku equals twice the energy to rounding. Dirichlet
/// conditions are eliminated symmetrically: rows/columns zeroed, unit
/// diagonal, lifted boundary values moved to the right-hand side.

#pragma once

#include <cstdint>
#include <vector>

#include "mgpde/problem.hpp"
#include "mgpde/tensor.hpp"

namespace mgpde {

/// Compressed-sparse-row symmetric matrix.
struct SparseMatrix {
    std::int64_t n = 0;
    std::vector<std::int64_t> row_ptr;  // n + 1 entries
    std::vector<std::int64_t> col;
    std::vector<double> val;
    bool symmetric = true;

    void multiply(const double* x, double* y) const;
    std::vector<double> multiply(const std::vector<double>& x) const;
    /// x' A x with a fixed row-major accumulation order.
    double quadratic(const std::vector<double>& x) const;
    double entry(std::int64_t row, std::int64_t column) const;
};

struct LinearSystem {
    SparseMatrix matrix;
    std::vector<double> rhs;
    std::vector<double> dirichlet_values;  // full-length, 0 on free nodes
};

/// Pure-Neumann stiffness operator (no boundary elimination): the discrete
/// bilinear form B(.,.). Throws on non-positive nu.
SparseMatrix assemble_raw(const Tensor& nu, const GridSpec& grid);

/// Stiffness system with Dirichlet faces eliminated; rhs carries the lifted
/// boundary values and the optional consistent load of a nodal forcing field.
LinearSystem assemble(const Tensor& nu, const GridSpec& grid, const Tensor* forcing = nullptr);

struct CgResult {
    std::vector<double> x;
    std::int64_t iterations = 0;
    double rel_residual = 0.0;
};

/// Plain conjugate gradients (optionally Jacobi-preconditioned), fixed
/// iteration order, deterministic. Throws Error::numeric with the final
/// residual if tol is not reached within max_iter.
CgResult solve_cg(const SparseMatrix& K, const std::vector<double>& rhs, double tol,
                  std::int64_t max_iter, bool jacobi = false,
                  const std::vector<double>* x0 = nullptr);

/// diffusivity_field -> assemble -> solve_cg at tol 1e-12. Boundary faces are
/// exact by construction of the eliminated system.
Tensor fem_solution(const OmegaSample& omega, const GridSpec& grid);

/// fem_solution for an explicit nodal diffusivity (shape (1,1,...)).
Tensor fem_solution_for(const Tensor& nu, const GridSpec& grid);

}  // namespace mgpde
