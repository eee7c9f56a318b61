/// @file element_rule.hpp
/// @brief Shared multilinear element quadrature (internal).
///
/// Both the energy loss and the stiffness assembly evaluate the same
/// tensor-product 2-point Gauss rule through this table, which is what makes
/// them agree to rounding.

#pragma once

#include <array>
#include <cmath>

#include "mgpde/problem.hpp"

namespace mgpde::detail {

struct ElementRule {
    int rank;
    int nq;              // quadrature points: 4 in 2-D, 8 in 3-D
    int nl;              // local nodes: 4 or 8
    double weight_detj;  // w_q * |J|, uniform over points
    std::array<std::array<double, 8>, 8> shape;                // [q][local]
    std::array<std::array<std::array<double, 3>, 8>, 8> grad;  // [q][local][axis]
};

inline ElementRule element_rule(const GridSpec& grid) {
    const double gp = 1.0 / std::sqrt(3.0);
    double h = grid.spacing();
    ElementRule r{};
    r.rank = grid.rank;
    r.nq = grid.rank == 3 ? 8 : 4;
    r.nl = r.nq;
    r.weight_detj = std::pow(0.5 * h, grid.rank);  // Gauss weights are 1 on [-1,1]
    auto l = [](int a, double t) { return a == 0 ? 0.5 * (1.0 - t) : 0.5 * (1.0 + t); };
    auto dl = [](int a) { return a == 0 ? -0.5 : 0.5; };
    double jac = 2.0 / h;

    int zq_max = grid.rank == 3 ? 2 : 1;
    int q = 0;
    for (int qz = 0; qz < zq_max; ++qz)
        for (int qy = 0; qy < 2; ++qy)
            for (int qx = 0; qx < 2; ++qx, ++q) {
                double tz = qz == 0 ? -gp : gp;
                double ty = qy == 0 ? -gp : gp;
                double tx = qx == 0 ? -gp : gp;
                int lidx = 0;
                int lz_max = grid.rank == 3 ? 2 : 1;
                for (int lz = 0; lz < lz_max; ++lz)
                    for (int ly = 0; ly < 2; ++ly)
                        for (int lx = 0; lx < 2; ++lx, ++lidx) {
                            double sz = grid.rank == 3 ? l(lz, tz) : 1.0;
                            double sy = l(ly, ty);
                            double sx = l(lx, tx);
                            r.shape[q][lidx] = sx * sy * sz;
                            r.grad[q][lidx][0] = dl(lx) * jac * sy * sz;
                            r.grad[q][lidx][1] = sx * dl(ly) * jac * sz;
                            r.grad[q][lidx][2] = grid.rank == 3 ? sx * sy * dl(lz) * jac : 0.0;
                        }
            }
    return r;
}

}  // namespace mgpde::detail
