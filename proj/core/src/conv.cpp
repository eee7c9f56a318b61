#include "mgpde/tensor_ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

namespace mgpde {

namespace {

std::atomic<int> g_backend{static_cast<int>(ConvBackend::Auto)};
std::atomic<int> g_threads{1};

// Spatial geometry shared by conv and conv_transpose. 2-D inputs are handled
// as depth-1 3-D volumes with a unit kernel and no padding on the dummy axis.
struct ConvGeom {
    std::int64_t batch, cin, cout;
    std::int64_t id, ih, iw;
    std::int64_t kd, kh, kw;
    std::int64_t od, oh, ow;
    std::int64_t sd, sh, sw;
    std::int64_t pd, ph, pw;

    std::int64_t ktotal() const { return cin * kd * kh * kw; }
    std::int64_t out_spatial() const { return od * oh * ow; }
    std::int64_t in_spatial() const { return id * ih * iw; }
};

ConvGeom make_geom(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                   int padding, bool transpose) {
    if (input.rank() != 4 && input.rank() != 5) {
        throw Error::shape("conv: input must be rank 4 or 5, got rank " +
                           std::to_string(input.rank()));
    }
    if (kernel.rank() != input.rank()) {
        throw Error::shape("conv: kernel rank " + std::to_string(kernel.rank()) +
                           " does not match input rank " + std::to_string(input.rank()));
    }
    if (stride < 1) throw Error::config("conv: stride must be positive");
    if (transpose && stride != 1 && stride != 2) {
        throw Error::config("conv_transpose: stride must be 1 or 2, got " + std::to_string(stride));
    }
    if (padding < 0) throw Error::config("conv: padding must be non-negative");

    bool is3d = input.rank() == 5;
    ConvGeom g{};
    g.batch = input.dim(0);
    // conv kernel: (cout, cin, k...); conv_transpose kernel: (cin, cout, k...)
    std::int64_t kc_first = kernel.dim(0), kc_second = kernel.dim(1);
    g.cin = transpose ? kc_first : kc_second;
    g.cout = transpose ? kc_second : kc_first;
    if (input.dim(1) != g.cin) {
        throw Error::shape("conv: input channels " + std::to_string(input.dim(1)) +
                           " do not match kernel channels " + std::to_string(g.cin) +
                           " at axis 1");
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
        throw Error::shape("conv: bias length must equal output channels " +
                           std::to_string(g.cout));
    }
    g.id = is3d ? input.dim(2) : 1;
    g.ih = input.dim(input.rank() - 2);
    g.iw = input.dim(input.rank() - 1);
    g.kd = is3d ? kernel.dim(2) : 1;
    g.kh = kernel.dim(kernel.rank() - 2);
    g.kw = kernel.dim(kernel.rank() - 1);
    g.sd = is3d ? stride : 1;
    g.sh = g.sw = stride;
    g.pd = is3d ? padding : 0;
    g.ph = g.pw = padding;

    auto out_extent = [&](std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p,
                          const char* axis) {
        std::int64_t o = transpose ? (in - 1) * s - 2 * p + k : (in + 2 * p - k) / s + 1;
        if (o < 1 || (!transpose && in + 2 * p < k)) {
            throw Error::shape(std::string("conv: non-positive output extent on axis ") + axis);
        }
        return o;
    };
    g.od = is3d ? out_extent(g.id, g.kd, g.sd, g.pd, "depth") : 1;
    g.oh = out_extent(g.ih, g.kh, g.sh, g.ph, "height");
    g.ow = out_extent(g.iw, g.kw, g.sw, g.pw, "width");
    return g;
}

std::vector<std::int64_t> out_shape(const Tensor& input, const ConvGeom& g) {
    if (input.rank() == 5) return {g.batch, g.cout, g.od, g.oh, g.ow};
    return {g.batch, g.cout, g.oh, g.ow};
}

// C(M x N) += A(M x K) * B(K x N), all row-major. Per output element the
// k-accumulation is sequential, matching the direct loops.
void gemm_acc(std::int64_t M, std::int64_t N, std::int64_t K, const double* A, const double* B,
              double* C, int threads) {
    parallel_for(M, threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* arow = A + i * K;
            double* crow = C + i * N;
            for (std::int64_t k = 0; k < K; ++k) {
                double a = arow[k];
                const double* brow = B + k * N;
                for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
            }
        }
    });
}

// C(M x J) += A(M x T) * B(J x T)^T  (rows of B dotted against rows of A).
void gemm_abt_acc(std::int64_t M, std::int64_t J, std::int64_t T, const double* A, const double* B,
                  double* C, int threads) {
    parallel_for(M, threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* arow = A + i * T;
            for (std::int64_t j = 0; j < J; ++j) {
                const double* brow = B + j * T;
                double acc = 0.0;
                for (std::int64_t t = 0; t < T; ++t) acc += arow[t] * brow[t];
                C[i * J + j] += acc;
            }
        }
    });
}

// C(K x N) += A(M x K)^T * B(M x N).
void gemm_atb_acc(std::int64_t M, std::int64_t N, std::int64_t K, const double* A, const double* B,
                  double* C) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* arow = A + m * K;
        const double* brow = B + m * N;
        for (std::int64_t k = 0; k < K; ++k) {
            double a = arow[k];
            double* crow = C + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
}

// Gather one sample into column matrix: cols[(ic,kz,ky,kx)][(z,y,x)].
void im2col(const ConvGeom& g, const double* in, double* cols) {
    std::int64_t ospatial = g.out_spatial();
    for (std::int64_t ic = 0; ic < g.cin; ++ic) {
        const double* chan = in + ic * g.in_spatial();
        for (std::int64_t kz = 0; kz < g.kd; ++kz)
            for (std::int64_t ky = 0; ky < g.kh; ++ky)
                for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                    double* row = cols + (((ic * g.kd + kz) * g.kh + ky) * g.kw + kx) * ospatial;
                    std::int64_t o = 0;
                    for (std::int64_t z = 0; z < g.od; ++z) {
                        std::int64_t iz = z * g.sd - g.pd + kz;
                        bool zok = iz >= 0 && iz < g.id;
                        for (std::int64_t y = 0; y < g.oh; ++y) {
                            std::int64_t iy = y * g.sh - g.ph + ky;
                            bool yok = iy >= 0 && iy < g.ih;
                            for (std::int64_t x = 0; x < g.ow; ++x, ++o) {
                                std::int64_t ix = x * g.sw - g.pw + kx;
                                row[o] = (zok && yok && ix >= 0 && ix < g.iw)
                                             ? chan[(iz * g.ih + iy) * g.iw + ix]
                                             : 0.0;
                            }
                        }
                    }
                }
    }
}

// Scatter column-matrix gradients back to one input sample.
void col2im_acc(const ConvGeom& g, const double* cols, double* din) {
    std::int64_t ospatial = g.out_spatial();
    for (std::int64_t ic = 0; ic < g.cin; ++ic) {
        double* chan = din + ic * g.in_spatial();
        for (std::int64_t kz = 0; kz < g.kd; ++kz)
            for (std::int64_t ky = 0; ky < g.kh; ++ky)
                for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                    const double* row = cols + (((ic * g.kd + kz) * g.kh + ky) * g.kw + kx) * ospatial;
                    std::int64_t o = 0;
                    for (std::int64_t z = 0; z < g.od; ++z) {
                        std::int64_t iz = z * g.sd - g.pd + kz;
                        bool zok = iz >= 0 && iz < g.id;
                        for (std::int64_t y = 0; y < g.oh; ++y) {
                            std::int64_t iy = y * g.sh - g.ph + ky;
                            bool yok = iy >= 0 && iy < g.ih;
                            for (std::int64_t x = 0; x < g.ow; ++x, ++o) {
                                std::int64_t ix = x * g.sw - g.pw + kx;
                                if (zok && yok && ix >= 0 && ix < g.iw)
                                    chan[(iz * g.ih + iy) * g.iw + ix] += row[o];
                            }
                        }
                    }
                }
    }
}

bool use_im2col(const ConvGeom& g) {
    ConvBackend b = conv_backend();
    if (b == ConvBackend::Naive) return false;
    if (b == ConvBackend::Im2col) return true;
    return g.id == 1;  // Auto: direct loops for 3-D volumes, im2col otherwise
}

thread_local std::vector<double> tl_cols;

void conv_forward(const ConvGeom& g, const double* in, const double* K, const double* bias,
                  double* out) {
    std::int64_t ospatial = g.out_spatial();
    std::int64_t ktot = g.ktotal();
    if (use_im2col(g)) {
        int nt = intra_op_threads();
        parallel_for(g.batch, nt, [&](std::int64_t blo, std::int64_t bhi) {
            if (tl_cols.size() < static_cast<std::size_t>(ktot * ospatial))
                tl_cols.resize(static_cast<std::size_t>(ktot * ospatial));
            for (std::int64_t b = blo; b < bhi; ++b) {
                im2col(g, in + b * g.cin * g.in_spatial(), tl_cols.data());
                double* osample = out + b * g.cout * ospatial;
                for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                    double v = bias ? bias[oc] : 0.0;
                    std::fill(osample + oc * ospatial, osample + (oc + 1) * ospatial, v);
                }
                gemm_acc(g.cout, ospatial, ktot, K, tl_cols.data(), osample, 1);
            }
        });
        return;
    }
    int nt = intra_op_threads();
    parallel_for(g.batch, nt, [&](std::int64_t blo, std::int64_t bhi) {
        for (std::int64_t b = blo; b < bhi; ++b) {
            const double* isample = in + b * g.cin * g.in_spatial();
            double* osample = out + b * g.cout * ospatial;
            for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                const double* kbase = K + oc * ktot;
                double* ochan = osample + oc * ospatial;
                std::int64_t o = 0;
                for (std::int64_t z = 0; z < g.od; ++z)
                    for (std::int64_t y = 0; y < g.oh; ++y)
                        for (std::int64_t x = 0; x < g.ow; ++x, ++o) {
                            double acc = bias ? bias[oc] : 0.0;
                            for (std::int64_t ic = 0; ic < g.cin; ++ic) {
                                const double* chan = isample + ic * g.in_spatial();
                                const double* kc = kbase + ic * g.kd * g.kh * g.kw;
                                for (std::int64_t kz = 0; kz < g.kd; ++kz) {
                                    std::int64_t iz = z * g.sd - g.pd + kz;
                                    if (iz < 0 || iz >= g.id) continue;
                                    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                                        std::int64_t iy = y * g.sh - g.ph + ky;
                                        if (iy < 0 || iy >= g.ih) continue;
                                        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                                            std::int64_t ix = x * g.sw - g.pw + kx;
                                            if (ix < 0 || ix >= g.iw) continue;
                                            acc += chan[(iz * g.ih + iy) * g.iw + ix] *
                                                   kc[(kz * g.kh + ky) * g.kw + kx];
                                        }
                                    }
                                }
                            }
                            ochan[o] = acc;
                        }
            }
        }
    });
}

// dK += gout * cols^T and din += K^T * gout, sample by sample.
void conv_backward(const ConvGeom& g, const double* in, const double* K, const double* gout,
                   double* din, double* dk, double* dbias) {
    std::int64_t ospatial = g.out_spatial();
    std::int64_t ktot = g.ktotal();

    if (dbias) {
        for (std::int64_t b = 0; b < g.batch; ++b)
            for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                const double* go = gout + (b * g.cout + oc) * ospatial;
                double acc = 0.0;
                for (std::int64_t o = 0; o < ospatial; ++o) acc += go[o];
                dbias[oc] += acc;
            }
    }

    if (use_im2col(g)) {
        if (tl_cols.size() < static_cast<std::size_t>(2 * ktot * ospatial))
            tl_cols.resize(static_cast<std::size_t>(2 * ktot * ospatial));
        double* cols = tl_cols.data();
        double* dcols = tl_cols.data() + ktot * ospatial;
        int nt = intra_op_threads();
        for (std::int64_t b = 0; b < g.batch; ++b) {
            const double* gsample = gout + b * g.cout * ospatial;
            if (dk) {
                im2col(g, in + b * g.cin * g.in_spatial(), cols);
                gemm_abt_acc(g.cout, ktot, ospatial, gsample, cols, dk, nt);
            }
            if (din) {
                std::fill(dcols, dcols + ktot * ospatial, 0.0);
                gemm_atb_acc(g.cout, ospatial, ktot, K, gsample, dcols);
                col2im_acc(g, dcols, din + b * g.cin * g.in_spatial());
            }
        }
        return;
    }

    for (std::int64_t b = 0; b < g.batch; ++b) {
        const double* isample = in + b * g.cin * g.in_spatial();
        double* disample = din ? din + b * g.cin * g.in_spatial() : nullptr;
        for (std::int64_t oc = 0; oc < g.cout; ++oc) {
            const double* go = gout + (b * g.cout + oc) * ospatial;
            const double* kbase = K + oc * ktot;
            double* dkbase = dk ? dk + oc * ktot : nullptr;
            std::int64_t o = 0;
            for (std::int64_t z = 0; z < g.od; ++z)
                for (std::int64_t y = 0; y < g.oh; ++y)
                    for (std::int64_t x = 0; x < g.ow; ++x, ++o) {
                        double gv = go[o];
                        if (gv == 0.0) continue;
                        for (std::int64_t ic = 0; ic < g.cin; ++ic) {
                            std::int64_t koff = ic * g.kd * g.kh * g.kw;
                            for (std::int64_t kz = 0; kz < g.kd; ++kz) {
                                std::int64_t iz = z * g.sd - g.pd + kz;
                                if (iz < 0 || iz >= g.id) continue;
                                for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                                    std::int64_t iy = y * g.sh - g.ph + ky;
                                    if (iy < 0 || iy >= g.ih) continue;
                                    for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                                        std::int64_t ix = x * g.sw - g.pw + kx;
                                        if (ix < 0 || ix >= g.iw) continue;
                                        std::int64_t ii = (ic * g.id + iz) * g.ih * g.iw +
                                                          iy * g.iw + ix;
                                        std::int64_t ki = koff + (kz * g.kh + ky) * g.kw + kx;
                                        if (disample) disample[ii] += gv * kbase[ki];
                                        if (dkbase) dkbase[ki] += gv * isample[ii];
                                    }
                                }
                            }
                        }
                    }
        }
    }
}

// conv_transpose forward: scatter each input element through the kernel.
void convt_forward(const ConvGeom& g, const double* in, const double* K, const double* bias,
                   double* out) {
    std::int64_t ospatial = g.out_spatial();
    std::int64_t kvol = g.kd * g.kh * g.kw;
    int nt = intra_op_threads();
    parallel_for(g.batch, nt, [&](std::int64_t blo, std::int64_t bhi) {
        for (std::int64_t b = blo; b < bhi; ++b) {
            double* osample = out + b * g.cout * ospatial;
            for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                double v = bias ? bias[oc] : 0.0;
                std::fill(osample + oc * ospatial, osample + (oc + 1) * ospatial, v);
            }
            const double* isample = in + b * g.cin * g.in_spatial();
            for (std::int64_t ic = 0; ic < g.cin; ++ic) {
                const double* chan = isample + ic * g.in_spatial();
                std::int64_t i = 0;
                for (std::int64_t z = 0; z < g.id; ++z)
                    for (std::int64_t y = 0; y < g.ih; ++y)
                        for (std::int64_t x = 0; x < g.iw; ++x, ++i) {
                            double v = chan[i];
                            if (v == 0.0) continue;
                            for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                                const double* kc = K + (ic * g.cout + oc) * kvol;
                                double* ochan = osample + oc * ospatial;
                                for (std::int64_t kz = 0; kz < g.kd; ++kz) {
                                    std::int64_t oz = z * g.sd - g.pd + kz;
                                    if (oz < 0 || oz >= g.od) continue;
                                    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                                        std::int64_t oy = y * g.sh - g.ph + ky;
                                        if (oy < 0 || oy >= g.oh) continue;
                                        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                                            std::int64_t ox = x * g.sw - g.pw + kx;
                                            if (ox < 0 || ox >= g.ow) continue;
                                            ochan[(oz * g.oh + oy) * g.ow + ox] +=
                                                v * kc[(kz * g.kh + ky) * g.kw + kx];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    });
}

void convt_backward(const ConvGeom& g, const double* in, const double* K, const double* gout,
                    double* din, double* dk, double* dbias) {
    std::int64_t ospatial = g.out_spatial();
    std::int64_t kvol = g.kd * g.kh * g.kw;

    if (dbias) {
        for (std::int64_t b = 0; b < g.batch; ++b)
            for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                const double* go = gout + (b * g.cout + oc) * ospatial;
                double acc = 0.0;
                for (std::int64_t o = 0; o < ospatial; ++o) acc += go[o];
                dbias[oc] += acc;
            }
    }

    for (std::int64_t b = 0; b < g.batch; ++b) {
        const double* isample = in + b * g.cin * g.in_spatial();
        const double* gsample = gout + b * g.cout * ospatial;
        double* disample = din ? din + b * g.cin * g.in_spatial() : nullptr;
        for (std::int64_t ic = 0; ic < g.cin; ++ic) {
            std::int64_t i = 0;
            for (std::int64_t z = 0; z < g.id; ++z)
                for (std::int64_t y = 0; y < g.ih; ++y)
                    for (std::int64_t x = 0; x < g.iw; ++x, ++i) {
                        double acc = 0.0;
                        double vin = isample[ic * g.in_spatial() + i];
                        for (std::int64_t oc = 0; oc < g.cout; ++oc) {
                            const double* kc = K + (ic * g.cout + oc) * kvol;
                            double* dkc = dk ? dk + (ic * g.cout + oc) * kvol : nullptr;
                            const double* gchan = gsample + oc * ospatial;
                            for (std::int64_t kz = 0; kz < g.kd; ++kz) {
                                std::int64_t oz = z * g.sd - g.pd + kz;
                                if (oz < 0 || oz >= g.od) continue;
                                for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                                    std::int64_t oy = y * g.sh - g.ph + ky;
                                    if (oy < 0 || oy >= g.oh) continue;
                                    for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                                        std::int64_t ox = x * g.sw - g.pw + kx;
                                        if (ox < 0 || ox >= g.ow) continue;
                                        double gv = gchan[(oz * g.oh + oy) * g.ow + ox];
                                        std::int64_t ki = (kz * g.kh + ky) * g.kw + kx;
                                        acc += gv * kc[ki];
                                        if (dkc) dkc[ki] += vin * gv;
                                    }
                                }
                            }
                        }
                        if (disample) disample[ic * g.in_spatial() + i] += acc;
                    }
        }
    }
}

}  // namespace

void set_conv_backend(ConvBackend backend) { g_backend.store(static_cast<int>(backend)); }
ConvBackend conv_backend() { return static_cast<ConvBackend>(g_backend.load()); }
void set_intra_op_threads(int n) { g_threads.store(std::max(1, n)); }
int intra_op_threads() { return g_threads.load(); }

Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding,
            Tape* tape) {
    ConvGeom g = make_geom(input, kernel, bias, stride, padding, /*transpose=*/false);
    Tensor out(out_shape(input, g));
    conv_forward(g, input.data(), kernel.data(), bias.defined() ? bias.data() : nullptr,
                 out.data());

    bool gi = tape && tape->attached(input);
    bool gk = tape && tape->attached(kernel);
    bool gb = tape && bias.defined() && tape->attached(bias);
    if (gi || gk || gb) {
        std::vector<int> parents;
        if (gi) parents.push_back(input.node);
        if (gk) parents.push_back(kernel.node);
        if (gb) parents.push_back(bias.node);
        Tensor sin = input, sk = kernel;
        tape->record(out, parents,
                     [g, gi, gk, gb, sin, sk](const Tensor& gout, const std::vector<Tensor*>& pg) {
            int k = 0;
            double* din = gi ? pg[k++]->data() : nullptr;
            double* dk = gk ? pg[k++]->data() : nullptr;
            double* db = gb ? pg[k++]->data() : nullptr;
            conv_backward(g, sin.data(), sk.data(), gout.data(), din, dk, db);
        });
    }
    return out;
}

Tensor conv_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding, Tape* tape) {
    ConvGeom g = make_geom(input, kernel, bias, stride, padding, /*transpose=*/true);
    Tensor out(out_shape(input, g));
    convt_forward(g, input.data(), kernel.data(), bias.defined() ? bias.data() : nullptr,
                  out.data());

    bool gi = tape && tape->attached(input);
    bool gk = tape && tape->attached(kernel);
    bool gb = tape && bias.defined() && tape->attached(bias);
    if (gi || gk || gb) {
        std::vector<int> parents;
        if (gi) parents.push_back(input.node);
        if (gk) parents.push_back(kernel.node);
        if (gb) parents.push_back(bias.node);
        Tensor sin = input, sk = kernel;
        tape->record(out, parents,
                     [g, gi, gk, gb, sin, sk](const Tensor& gout, const std::vector<Tensor*>& pg) {
            int k = 0;
            double* din = gi ? pg[k++]->data() : nullptr;
            double* dk = gk ? pg[k++]->data() : nullptr;
            double* db = gb ? pg[k++]->data() : nullptr;
            convt_backward(g, sin.data(), sk.data(), gout.data(), din, dk, db);
        });
    }
    return out;
}

}  // namespace mgpde
