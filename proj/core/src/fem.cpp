#include "mgpde/fem.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "element_rule.hpp"

namespace mgpde {

namespace {

// Neighborhood stencil: 3^rank slots per row keyed by (dz,dy,dx) offset.
struct StencilAccumulator {
    std::int64_t n;
    std::int64_t nx, ny, nz;
    int rank;
    int slots;
    std::vector<double> val;     // n * slots
    std::vector<char> present;   // structural pattern

    StencilAccumulator(const GridSpec& grid)
        : n(grid.node_count()),
          nx(grid.resolution),
          ny(grid.resolution),
          nz(grid.rank == 3 ? grid.resolution : 1),
          rank(grid.rank),
          slots(grid.rank == 3 ? 27 : 9),
          val(static_cast<std::size_t>(n * slots), 0.0),
          present(static_cast<std::size_t>(n * slots), 0) {}

    int slot_of(std::int64_t dz, std::int64_t dy, std::int64_t dx) const {
        return rank == 3 ? static_cast<int>(((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1))
                         : static_cast<int>((dy + 1) * 3 + (dx + 1));
    }

    void add(std::int64_t row, std::int64_t col_dz, std::int64_t col_dy, std::int64_t col_dx,
             double v) {
        int s = slot_of(col_dz, col_dy, col_dx);
        val[static_cast<std::size_t>(row * slots + s)] += v;
        present[static_cast<std::size_t>(row * slots + s)] = 1;
    }

    SparseMatrix compress() const {
        SparseMatrix K;
        K.n = n;
        K.row_ptr.assign(static_cast<std::size_t>(n + 1), 0);
        std::int64_t nnz = 0;
        for (std::int64_t i = 0; i < n * slots; ++i) nnz += present[static_cast<std::size_t>(i)];
        K.col.reserve(static_cast<std::size_t>(nnz));
        K.val.reserve(static_cast<std::size_t>(nnz));
        for (std::int64_t row = 0; row < n; ++row) {
            std::int64_t iz = rank == 3 ? row / (nx * ny) : 0;
            std::int64_t rem = rank == 3 ? row % (nx * ny) : row;
            std::int64_t iy = rem / nx;
            std::int64_t ix = rem % nx;
            std::int64_t dz_max = rank == 3 ? 1 : 0;
            for (std::int64_t dz = -dz_max; dz <= dz_max; ++dz)
                for (std::int64_t dy = -1; dy <= 1; ++dy)
                    for (std::int64_t dx = -1; dx <= 1; ++dx) {
                        std::int64_t jz = iz + dz, jy = iy + dy, jx = ix + dx;
                        if (jx < 0 || jx >= nx || jy < 0 || jy >= ny || jz < 0 || jz >= nz)
                            continue;
                        int s = slot_of(dz, dy, dx);
                        if (!present[static_cast<std::size_t>(row * slots + s)]) continue;
                        K.col.push_back((jz * ny + jy) * nx + jx);
                        K.val.push_back(val[static_cast<std::size_t>(row * slots + s)]);
                    }
            K.row_ptr[static_cast<std::size_t>(row + 1)] = static_cast<std::int64_t>(K.col.size());
        }
        return K;
    }
};

std::vector<char> dirichlet_mask(const GridSpec& grid) {
    std::int64_t n = grid.resolution;
    std::int64_t planes = grid.rank == 3 ? n * n : n;
    std::vector<char> mask(static_cast<std::size_t>(grid.node_count()), 0);
    for (std::int64_t p = 0; p < planes; ++p) {
        mask[static_cast<std::size_t>(p * n)] = 1;          // x = 0 face
        mask[static_cast<std::size_t>(p * n + n - 1)] = 1;  // x = 1 face
    }
    return mask;
}

}  // namespace

void SparseMatrix::multiply(const double* x, double* y) const {
    for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::int64_t k = row_ptr[static_cast<std::size_t>(i)];
             k < row_ptr[static_cast<std::size_t>(i + 1)]; ++k) {
            acc += val[static_cast<std::size_t>(k)] * x[col[static_cast<std::size_t>(k)]];
        }
        y[i] = acc;
    }
}

std::vector<double> SparseMatrix::multiply(const std::vector<double>& x) const {
    if (static_cast<std::int64_t>(x.size()) != n) {
        throw Error::shape("sparse multiply: vector length " + std::to_string(x.size()) +
                           " does not match dimension " + std::to_string(n));
    }
    std::vector<double> y(static_cast<std::size_t>(n));
    multiply(x.data(), y.data());
    return y;
}

double SparseMatrix::quadratic(const std::vector<double>& x) const {
    if (static_cast<std::int64_t>(x.size()) != n) {
        throw Error::shape("sparse quadratic: vector length mismatch");
    }
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::int64_t k = row_ptr[static_cast<std::size_t>(i)];
             k < row_ptr[static_cast<std::size_t>(i + 1)]; ++k) {
            row += val[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(col[static_cast<std::size_t>(k)])];
        }
        acc += x[static_cast<std::size_t>(i)] * row;
    }
    return acc;
}

double SparseMatrix::entry(std::int64_t row, std::int64_t column) const {
    for (std::int64_t k = row_ptr[static_cast<std::size_t>(row)];
         k < row_ptr[static_cast<std::size_t>(row + 1)]; ++k) {
        if (col[static_cast<std::size_t>(k)] == column) return val[static_cast<std::size_t>(k)];
    }
    return 0.0;
}

SparseMatrix assemble_raw(const Tensor& nu, const GridSpec& grid) {
    grid.validate();
    std::int64_t n = grid.resolution;
    if (nu.numel() != grid.node_count()) {
        throw Error::shape("assemble: nu has " + std::to_string(nu.numel()) +
                           " values, grid has " + std::to_string(grid.node_count()) + " nodes");
    }
    const double* pnu = nu.data();
    for (std::int64_t i = 0; i < nu.numel(); ++i) {
        if (!(pnu[i] > 0.0)) {
            throw Error::numeric("assemble: non-positive diffusivity at node " + std::to_string(i));
        }
    }

    detail::ElementRule rule = detail::element_rule(grid);
    StencilAccumulator acc(grid);

    std::int64_t stride_z = grid.rank == 3 ? n * n : 0;
    std::int64_t ez_max = grid.rank == 3 ? n - 1 : 1;
    std::array<std::int64_t, 8> nodes{};
    std::array<std::array<std::int64_t, 3>, 8> offs{};  // local node (dz,dy,dx) within element
    {
        int lidx = 0;
        int lz_max = grid.rank == 3 ? 2 : 1;
        for (int lz = 0; lz < lz_max; ++lz)
            for (int ly = 0; ly < 2; ++ly)
                for (int lx = 0; lx < 2; ++lx, ++lidx)
                    offs[static_cast<std::size_t>(lidx)] = {lz, ly, lx};
    }

    for (std::int64_t ez = 0; ez < ez_max; ++ez)
        for (std::int64_t ey = 0; ey < n - 1; ++ey)
            for (std::int64_t ex = 0; ex < n - 1; ++ex) {
                for (int l = 0; l < rule.nl; ++l) {
                    nodes[static_cast<std::size_t>(l)] =
                        (ez + offs[static_cast<std::size_t>(l)][0]) * stride_z +
                        (ey + offs[static_cast<std::size_t>(l)][1]) * n +
                        (ex + offs[static_cast<std::size_t>(l)][2]);
                }
                // Local stiffness: sum_q w |J| nu(q) grad(N_a) . grad(N_b)
                for (int a = 0; a < rule.nl; ++a)
                    for (int b = 0; b < rule.nl; ++b) {
                        double kab = 0.0;
                        for (int q = 0; q < rule.nq; ++q) {
                            double nuq = 0.0;
                            for (int l = 0; l < rule.nl; ++l)
                                nuq += rule.shape[q][l] * pnu[nodes[static_cast<std::size_t>(l)]];
                            double dot = rule.grad[q][a][0] * rule.grad[q][b][0] +
                                         rule.grad[q][a][1] * rule.grad[q][b][1] +
                                         rule.grad[q][a][2] * rule.grad[q][b][2];
                            kab += rule.weight_detj * nuq * dot;
                        }
                        acc.add(nodes[static_cast<std::size_t>(a)],
                                offs[static_cast<std::size_t>(b)][0] - offs[static_cast<std::size_t>(a)][0],
                                offs[static_cast<std::size_t>(b)][1] - offs[static_cast<std::size_t>(a)][1],
                                offs[static_cast<std::size_t>(b)][2] - offs[static_cast<std::size_t>(a)][2],
                                kab);
                    }
            }
    return acc.compress();
}

LinearSystem assemble(const Tensor& nu, const GridSpec& grid, const Tensor* forcing) {
    SparseMatrix K = assemble_raw(nu, grid);
    std::int64_t n_nodes = K.n;
    std::vector<double> rhs(static_cast<std::size_t>(n_nodes), 0.0);

    if (forcing) {
        // Consistent load: rhs_i = int f phi_i over the elements.
        if (forcing->numel() != n_nodes) {
            throw Error::shape("assemble: forcing length does not match node count");
        }
        detail::ElementRule rule = detail::element_rule(grid);
        std::int64_t n = grid.resolution;
        std::int64_t stride_z = grid.rank == 3 ? n * n : 0;
        std::int64_t ez_max = grid.rank == 3 ? n - 1 : 1;
        const double* pf = forcing->data();
        for (std::int64_t ez = 0; ez < ez_max; ++ez)
            for (std::int64_t ey = 0; ey < n - 1; ++ey)
                for (std::int64_t ex = 0; ex < n - 1; ++ex) {
                    std::array<std::int64_t, 8> nodes{};
                    int lidx = 0;
                    int lz_max = grid.rank == 3 ? 2 : 1;
                    for (int lz = 0; lz < lz_max; ++lz)
                        for (int ly = 0; ly < 2; ++ly)
                            for (int lx = 0; lx < 2; ++lx, ++lidx)
                                nodes[static_cast<std::size_t>(lidx)] =
                                    (ez + lz) * stride_z + (ey + ly) * n + (ex + lx);
                    for (int q = 0; q < rule.nq; ++q) {
                        double fq = 0.0;
                        for (int l = 0; l < rule.nl; ++l)
                            fq += rule.shape[q][l] * pf[nodes[static_cast<std::size_t>(l)]];
                        for (int l = 0; l < rule.nl; ++l)
                            rhs[static_cast<std::size_t>(nodes[static_cast<std::size_t>(l)])] +=
                                rule.weight_detj * fq * rule.shape[q][l];
                    }
                }
    }

    std::vector<char> bc = dirichlet_mask(grid);
    std::vector<double> g(static_cast<std::size_t>(n_nodes), 0.0);
    {
        std::int64_t n = grid.resolution;
        std::int64_t planes = grid.rank == 3 ? n * n : n;
        for (std::int64_t p = 0; p < planes; ++p) g[static_cast<std::size_t>(p * n)] = 1.0;  // u = 1 at x = 0
    }

    // Symmetric elimination: move K[i,d] g_d to the rhs, zero row and column,
    // unit diagonal, rhs[d] = g_d.
    for (std::int64_t i = 0; i < n_nodes; ++i) {
        for (std::int64_t k = K.row_ptr[static_cast<std::size_t>(i)];
             k < K.row_ptr[static_cast<std::size_t>(i + 1)]; ++k) {
            std::int64_t j = K.col[static_cast<std::size_t>(k)];
            if (bc[static_cast<std::size_t>(i)]) {
                K.val[static_cast<std::size_t>(k)] = (i == j) ? 1.0 : 0.0;
            } else if (bc[static_cast<std::size_t>(j)]) {
                rhs[static_cast<std::size_t>(i)] -=
                    K.val[static_cast<std::size_t>(k)] * g[static_cast<std::size_t>(j)];
                K.val[static_cast<std::size_t>(k)] = 0.0;
            }
        }
        if (bc[static_cast<std::size_t>(i)]) rhs[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)];
    }

    return LinearSystem{std::move(K), std::move(rhs), std::move(g)};
}

CgResult solve_cg(const SparseMatrix& K, const std::vector<double>& rhs, double tol,
                  std::int64_t max_iter, bool jacobi, const std::vector<double>* x0) {
    if (tol <= 0.0) throw Error::config("solve_cg: tol must be positive");
    if (static_cast<std::int64_t>(rhs.size()) != K.n) {
        throw Error::shape("solve_cg: rhs length does not match matrix dimension");
    }
    std::size_t n = rhs.size();
    std::vector<double> x = x0 ? *x0 : std::vector<double>(n, 0.0);
    if (x.size() != n) throw Error::shape("solve_cg: x0 length mismatch");

    std::vector<double> diag_inv;
    if (jacobi) {
        diag_inv.resize(n);
        for (std::int64_t i = 0; i < K.n; ++i) {
            double d = K.entry(i, i);
            if (!(d > 0.0)) throw Error::numeric("solve_cg: non-positive diagonal for Jacobi");
            diag_inv[static_cast<std::size_t>(i)] = 1.0 / d;
        }
    }

    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };

    std::vector<double> r(n), z(n), p(n), q(n);
    K.multiply(x.data(), q.data());
    for (std::size_t i = 0; i < n; ++i) r[i] = rhs[i] - q[i];
    double bnorm = std::sqrt(dot(rhs, rhs));
    if (bnorm == 0.0) bnorm = 1.0;

    auto precond = [&](const std::vector<double>& rin, std::vector<double>& zout) {
        if (jacobi) {
            for (std::size_t i = 0; i < n; ++i) zout[i] = rin[i] * diag_inv[i];
        } else {
            zout = rin;
        }
    };

    double rel = std::sqrt(dot(r, r)) / bnorm;
    if (rel <= tol) return CgResult{std::move(x), 0, rel};

    precond(r, z);
    p = z;
    double rz = dot(r, z);
    for (std::int64_t it = 1; it <= max_iter; ++it) {
        K.multiply(p.data(), q.data());
        double pq = dot(p, q);
        if (pq <= 0.0) {
            throw Error::numeric("solve_cg: matrix is not positive definite (p'Ap = " +
                                 std::to_string(pq) + ")");
        }
        double alpha = rz / pq;
        for (std::size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
        for (std::size_t i = 0; i < n; ++i) r[i] -= alpha * q[i];
        rel = std::sqrt(dot(r, r)) / bnorm;
        if (rel <= tol) return CgResult{std::move(x), it, rel};
        precond(r, z);
        double rz_new = dot(r, z);
        double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    throw Error::numeric("solve_cg: no convergence in " + std::to_string(max_iter) +
                         " iterations, relative residual " + std::to_string(rel));
}

Tensor fem_solution_for(const Tensor& nu, const GridSpec& grid) {
    LinearSystem sys = assemble(nu, grid);
    // Starting from the lifted boundary vector keeps Dirichlet entries exact:
    // their residual is zero, so CG never moves them.
    CgResult res = solve_cg(sys.matrix, sys.rhs, 1e-12, 20 * sys.matrix.n + 100, false,
                            &sys.dirichlet_values);
    std::vector<std::int64_t> shape = grid.rank == 3
                                          ? std::vector<std::int64_t>{1, 1, grid.resolution,
                                                                      grid.resolution, grid.resolution}
                                          : std::vector<std::int64_t>{1, 1, grid.resolution,
                                                                      grid.resolution};
    return Tensor(shape, std::move(res.x));
}

Tensor fem_solution(const OmegaSample& omega, const GridSpec& grid) {
    return fem_solution_for(diffusivity_field(omega, grid), grid);
}

}  // namespace mgpde
