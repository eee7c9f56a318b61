#include "mgpde/problem.hpp"

#include <cmath>
#include <string>

#include "element_rule.hpp"
#include "mgpde/sobol.hpp"

namespace mgpde {

namespace {

using detail::ElementRule;
using detail::element_rule;

double xi(double a, double t) { return 0.5 * a * std::cos(a * t) + std::sin(a * t); }

struct BatchGeom {
    std::int64_t batch;
    std::int64_t nz, ny, nx;  // nz == 1 in 2-D
};

BatchGeom field_geom(const Tensor& t, const GridSpec& grid, const char* op) {
    grid.validate();
    int want_rank = grid.rank + 2;
    if (t.rank() != want_rank || t.dim(1) != 1) {
        throw Error::shape(std::string(op) + ": expected (B,1," +
                           (grid.rank == 3 ? "N,N,N)" : "N,N)") + " field for rank " +
                           std::to_string(grid.rank) + " grid");
    }
    for (int i = 2; i < t.rank(); ++i) {
        if (t.dim(i) != grid.resolution) {
            throw Error::shape(std::string(op) + ": extent " + std::to_string(t.dim(i)) +
                               " at axis " + std::to_string(i) + " does not match grid resolution " +
                               std::to_string(grid.resolution));
        }
    }
    BatchGeom g{t.dim(0), 1, grid.resolution, grid.resolution};
    if (grid.rank == 3) g.nz = grid.resolution;
    return g;
}

}  // namespace

std::array<double, 4> ProblemConstants::lambda() {
    std::array<double, 4> l{};
    for (int i = 0; i < m; ++i) l[static_cast<std::size_t>(i)] = 1.0 / (1.0 + 0.25 * a[static_cast<std::size_t>(i)] * a[static_cast<std::size_t>(i)]);
    return l;
}

std::int64_t GridSpec::node_count() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= resolution;
    return n;
}

std::int64_t GridSpec::element_count() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= resolution - 1;
    return n;
}

void GridSpec::validate() const {
    if (rank != 2 && rank != 3) {
        throw Error::config("grid rank must be 2 or 3, got " + std::to_string(rank));
    }
    // Any node count >= 2 is a valid FEM grid; the power-of-two constraint is
    // a network/schedule concern and is enforced there.
    if (resolution < 2) {
        throw Error::config("grid resolution must be >= 2, got " + std::to_string(resolution));
    }
}

BoundaryMasks BoundaryMasks::make(const GridSpec& grid) {
    grid.validate();
    std::int64_t n = grid.resolution;
    std::vector<std::int64_t> shape = grid.rank == 3
                                          ? std::vector<std::int64_t>{1, 1, n, n, n}
                                          : std::vector<std::int64_t>{1, 1, n, n};
    BoundaryMasks m{grid, Tensor(shape), Tensor(shape), Tensor(shape)};
    double* ci = m.chi_int.data();
    double* cb = m.chi_b.data();
    double* ub = m.u_bc.data();
    std::int64_t planes = grid.rank == 3 ? n * n : n;
    for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t ix = 0; ix < n; ++ix) {
            std::int64_t idx = p * n + ix;
            bool dirichlet = ix == 0 || ix == n - 1;
            cb[idx] = dirichlet ? 1.0 : 0.0;
            ci[idx] = dirichlet ? 0.0 : 1.0;
            ub[idx] = ix == 0 ? 1.0 : 0.0;
        }
    }
    return m;
}

Tensor diffusivity_field(const OmegaSample& omega, const GridSpec& grid) {
    grid.validate();
    for (int i = 0; i < 4; ++i) {
        if (omega[static_cast<std::size_t>(i)] < ProblemConstants::omega_min ||
            omega[static_cast<std::size_t>(i)] > ProblemConstants::omega_max) {
            throw Error::config("omega component " + std::to_string(i) + " = " +
                                std::to_string(omega[static_cast<std::size_t>(i)]) +
                                " outside [-3,3]");
        }
    }
    std::int64_t n = grid.resolution;
    double h = grid.spacing();
    auto lambda = ProblemConstants::lambda();

    // Per-axis factor tables; the field is a sum of tensor products.
    std::array<std::vector<double>, 4> fx, fy, fz;
    for (int i = 0; i < 4; ++i) {
        double a = ProblemConstants::a[static_cast<std::size_t>(i)];
        fx[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(n));
        fy[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(n));
        if (grid.rank == 3) fz[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(n));
        for (std::int64_t k = 0; k < n; ++k) {
            double t = static_cast<double>(k) * h;
            double v = xi(a, t);
            fx[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = v;
            fy[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = v;
            if (grid.rank == 3) fz[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = v;
        }
    }

    std::vector<std::int64_t> shape = grid.rank == 3
                                          ? std::vector<std::int64_t>{1, 1, n, n, n}
                                          : std::vector<std::int64_t>{1, 1, n, n};
    Tensor out(shape);
    double* po = out.data();
    std::int64_t nz = grid.rank == 3 ? n : 1;
    std::int64_t idx = 0;
    for (std::int64_t iz = 0; iz < nz; ++iz)
        for (std::int64_t iy = 0; iy < n; ++iy)
            for (std::int64_t ix = 0; ix < n; ++ix, ++idx) {
                double s = 0.0;
                for (int i = 0; i < 4; ++i) {
                    double term = omega[static_cast<std::size_t>(i)] *
                                  lambda[static_cast<std::size_t>(i)] *
                                  fx[static_cast<std::size_t>(i)][static_cast<std::size_t>(ix)] *
                                  fy[static_cast<std::size_t>(i)][static_cast<std::size_t>(iy)];
                    if (grid.rank == 3)
                        term *= fz[static_cast<std::size_t>(i)][static_cast<std::size_t>(iz)];
                    s += term;
                }
                po[idx] = std::exp(s);
            }
    return out;
}

double diffusivity_at(const OmegaSample& omega, const GridSpec& grid, double x, double y,
                      double z) {
    auto lambda = ProblemConstants::lambda();
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
        double a = ProblemConstants::a[static_cast<std::size_t>(i)];
        double term = omega[static_cast<std::size_t>(i)] * lambda[static_cast<std::size_t>(i)] *
                      xi(a, x) * xi(a, y);
        if (grid.rank == 3) term *= xi(a, z);
        s += term;
    }
    return std::exp(s);
}

std::vector<OmegaSample> sample_omegas(std::int64_t count, std::uint64_t seed) {
    if (count < 1) throw Error::config("sample count must be >= 1");
    Sobol4 sobol;
    sobol.seek(seed);
    std::vector<OmegaSample> out;
    out.reserve(static_cast<std::size_t>(count));
    const double lo = ProblemConstants::omega_min;
    const double span = ProblemConstants::omega_max - ProblemConstants::omega_min;
    for (std::int64_t i = 0; i < count; ++i) {
        auto u = sobol.next();
        OmegaSample w;
        for (int d = 0; d < 4; ++d) w[static_cast<std::size_t>(d)] = lo + span * u[static_cast<std::size_t>(d)];
        out.push_back(w);
    }
    return out;
}

Tensor apply_bc(const Tensor& u_int, const BoundaryMasks& masks, Tape* tape) {
    BatchGeom g = field_geom(u_int, masks.grid, "apply_bc");
    std::int64_t plane = g.nz * g.ny * g.nx;
    Tensor out(u_int.shape());
    const double* pu = u_int.data();
    const double* ci = masks.chi_int.data();
    const double* ub = masks.u_bc.data();
    double* po = out.data();
    for (std::int64_t b = 0; b < g.batch; ++b) {
        const double* us = pu + b * plane;
        double* os = po + b * plane;
        for (std::int64_t i = 0; i < plane; ++i) os[i] = us[i] * ci[i] + ub[i];
    }
    if (tape && tape->attached(u_int)) {
        Tensor chi = masks.chi_int;
        tape->record(out, {u_int.node},
                     [chi, plane, batch = g.batch](const Tensor& gout, const std::vector<Tensor*>& pg) {
            const double* pgo = gout.data();
            const double* ci_ = chi.data();
            double* d = pg[0]->data();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t i = 0; i < plane; ++i) d[b * plane + i] += pgo[b * plane + i] * ci_[i];
        });
    }
    return out;
}

namespace {

// Shared element sweep for the energy value and its gradient w.r.t. u.
// du_out, when given, receives dJ_sample/dU (not yet batch-averaged).
double energy_of_sample(const ElementRule& r, const GridSpec& grid, const double* u,
                        const double* nu, const double* f, double* du_out) {
    std::int64_t n = grid.resolution;
    std::int64_t ez_max = grid.rank == 3 ? n - 1 : 1;
    std::int64_t stride_z = grid.rank == 3 ? n * n : 0;
    double J = 0.0;
    std::array<std::int64_t, 8> nodes{};
    for (std::int64_t ez = 0; ez < ez_max; ++ez)
        for (std::int64_t ey = 0; ey < n - 1; ++ey)
            for (std::int64_t ex = 0; ex < n - 1; ++ex) {
                int lidx = 0;
                int lz_max = grid.rank == 3 ? 2 : 1;
                for (int lz = 0; lz < lz_max; ++lz)
                    for (int ly = 0; ly < 2; ++ly)
                        for (int lx = 0; lx < 2; ++lx, ++lidx)
                            nodes[static_cast<std::size_t>(lidx)] =
                                (ez + lz) * stride_z + (ey + ly) * n + (ex + lx);
                for (int q = 0; q < r.nq; ++q) {
                    double gx = 0.0, gy = 0.0, gz = 0.0, nuq = 0.0, uq = 0.0, fq = 0.0;
                    for (int l = 0; l < r.nl; ++l) {
                        double uv = u[nodes[static_cast<std::size_t>(l)]];
                        gx += r.grad[q][l][0] * uv;
                        gy += r.grad[q][l][1] * uv;
                        gz += r.grad[q][l][2] * uv;
                        nuq += r.shape[q][l] * nu[nodes[static_cast<std::size_t>(l)]];
                        if (f) {
                            uq += r.shape[q][l] * uv;
                            fq += r.shape[q][l] * f[nodes[static_cast<std::size_t>(l)]];
                        }
                    }
                    double w = r.weight_detj;
                    J += 0.5 * w * nuq * (gx * gx + gy * gy + gz * gz);
                    if (f) J -= w * fq * uq;
                    if (du_out) {
                        for (int l = 0; l < r.nl; ++l) {
                            double d = w * nuq *
                                       (gx * r.grad[q][l][0] + gy * r.grad[q][l][1] +
                                        gz * r.grad[q][l][2]);
                            if (f) d -= w * fq * r.shape[q][l];
                            du_out[nodes[static_cast<std::size_t>(l)]] += d;
                        }
                    }
                }
            }
    return J;
}

}  // namespace

Tensor energy_loss(const Tensor& u, const Tensor& nu, const GridSpec& grid, Tape* tape,
                   const Tensor* forcing) {
    BatchGeom g = field_geom(u, grid, "energy_loss");
    if (!nu.same_shape(u)) {
        BatchGeom gn = field_geom(nu, grid, "energy_loss(nu)");
        if (gn.batch != g.batch) {
            throw Error::shape("energy_loss: nu batch " + std::to_string(gn.batch) +
                               " does not match u batch " + std::to_string(g.batch));
        }
    }
    if (forcing && !forcing->same_shape(u)) field_geom(*forcing, grid, "energy_loss(forcing)");

    ElementRule rule = element_rule(grid);
    std::int64_t plane = g.nz * g.ny * g.nx;
    double acc = 0.0;
    for (std::int64_t b = 0; b < g.batch; ++b) {
        acc += energy_of_sample(rule, grid, u.data() + b * plane, nu.data() + b * plane,
                                forcing ? forcing->data() + b * plane : nullptr, nullptr);
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(g.batch));

    if (tape && tape->attached(u)) {
        Tensor su = u, snu = nu;
        Tensor sf = forcing ? *forcing : Tensor();
        tape->record(out, {u.node},
                     [rule, grid, su, snu, sf, plane, batch = g.batch](const Tensor& gout,
                                                                       const std::vector<Tensor*>& pg) {
            double scale = gout.value() / static_cast<double>(batch);
            Tensor dsample({plane});
            for (std::int64_t b = 0; b < batch; ++b) {
                double* ds = dsample.data();
                std::fill(ds, ds + plane, 0.0);
                energy_of_sample(rule, grid, su.data() + b * plane, snu.data() + b * plane,
                                 sf.defined() ? sf.data() + b * plane : nullptr, ds);
                double* d = pg[0]->data() + b * plane;
                for (std::int64_t i = 0; i < plane; ++i) d[i] += scale * ds[i];
            }
        });
    }
    return out;
}

std::vector<double> energy_per_sample(const Tensor& u, const Tensor& nu, const GridSpec& grid,
                                      const Tensor* forcing) {
    BatchGeom g = field_geom(u, grid, "energy_per_sample");
    ElementRule rule = element_rule(grid);
    std::int64_t plane = g.nz * g.ny * g.nx;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(g.batch));
    for (std::int64_t b = 0; b < g.batch; ++b) {
        out.push_back(energy_of_sample(rule, grid, u.data() + b * plane, nu.data() + b * plane,
                                       forcing ? forcing->data() + b * plane : nullptr, nullptr));
    }
    return out;
}

Tensor resample_field(const Tensor& field, const GridSpec& from, const GridSpec& to) {
    if (from.rank != to.rank) throw Error::config("resample_field: rank mismatch");
    BatchGeom g = field_geom(field, from, "resample_field");
    std::int64_t nf = from.resolution, nt = to.resolution;
    std::vector<std::int64_t> shape = from.rank == 3
                                          ? std::vector<std::int64_t>{g.batch, 1, nt, nt, nt}
                                          : std::vector<std::int64_t>{g.batch, 1, nt, nt};
    Tensor out(shape);

    // Per-axis source cell and weight; exact at shared endpoints.
    std::vector<std::int64_t> cell(static_cast<std::size_t>(nt));
    std::vector<double> wgt(static_cast<std::size_t>(nt));
    for (std::int64_t j = 0; j < nt; ++j) {
        double s = static_cast<double>(j * (nf - 1)) / static_cast<double>(nt - 1);
        std::int64_t c = std::min<std::int64_t>(static_cast<std::int64_t>(s), nf - 2);
        cell[static_cast<std::size_t>(j)] = c;
        wgt[static_cast<std::size_t>(j)] = s - static_cast<double>(c);
    }

    std::int64_t in_plane = g.nz * g.ny * g.nx;
    std::int64_t ntz = from.rank == 3 ? nt : 1;
    std::int64_t out_plane = ntz * nt * nt;
    std::int64_t sz = from.rank == 3 ? nf * nf : 0;
    const double* pf = field.data();
    double* po = out.data();
    for (std::int64_t b = 0; b < g.batch; ++b) {
        const double* src = pf + b * in_plane;
        double* dst = po + b * out_plane;
        std::int64_t o = 0;
        for (std::int64_t jz = 0; jz < ntz; ++jz) {
            std::int64_t cz = from.rank == 3 ? cell[static_cast<std::size_t>(jz)] : 0;
            double wz = from.rank == 3 ? wgt[static_cast<std::size_t>(jz)] : 0.0;
            for (std::int64_t jy = 0; jy < nt; ++jy) {
                std::int64_t cy = cell[static_cast<std::size_t>(jy)];
                double wy = wgt[static_cast<std::size_t>(jy)];
                for (std::int64_t jx = 0; jx < nt; ++jx, ++o) {
                    std::int64_t cx = cell[static_cast<std::size_t>(jx)];
                    double wx = wgt[static_cast<std::size_t>(jx)];
                    double v = 0.0;
                    int lz_max = from.rank == 3 ? 2 : 1;
                    for (int lz = 0; lz < lz_max; ++lz) {
                        double az = from.rank == 3 ? (lz == 0 ? 1.0 - wz : wz) : 1.0;
                        for (int ly = 0; ly < 2; ++ly) {
                            double ay = ly == 0 ? 1.0 - wy : wy;
                            for (int lx = 0; lx < 2; ++lx) {
                                double ax = lx == 0 ? 1.0 - wx : wx;
                                v += az * ay * ax *
                                     src[(cz + lz) * sz + (cy + ly) * nf + cx + lx];
                            }
                        }
                    }
                    dst[o] = v;
                }
            }
        }
    }
    return out;
}

}  // namespace mgpde
