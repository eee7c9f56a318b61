#include "mgpde/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

namespace mgpde {

void parallel_for(std::int64_t n, int threads,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    int nt = std::max(1, std::min<std::int64_t>(threads, n));
    if (nt == 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nt));
    std::int64_t chunk = (n + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return;
    for (int i = 0; i < std::max(a.rank(), b.rank()); ++i) {
        std::int64_t da = i < a.rank() ? a.dim(i) : -1;
        std::int64_t db = i < b.rank() ? b.dim(i) : -1;
        if (da != db) {
            throw Error::shape(std::string(op) + ": shape mismatch at axis " + std::to_string(i) +
                               " (" + std::to_string(da) + " vs " + std::to_string(db) + ")");
        }
    }
    throw Error::shape(std::string(op) + ": rank mismatch");
}

bool any_attached(Tape* tape, std::initializer_list<const Tensor*> ts) {
    if (!tape) return false;
    for (const Tensor* t : ts) {
        if (t && tape->attached(*t)) return true;
    }
    return false;
}

void axpy(Tensor& dst, double alpha, const Tensor& src) {
    double* d = dst.data();
    const double* s = src.data();
    std::int64_t n = dst.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += alpha * s[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    if (any_attached(tape, {&a, &b})) {
        std::vector<int> parents;
        bool ga = tape->attached(a), gb = tape->attached(b);
        if (ga) parents.push_back(a.node);
        if (gb) parents.push_back(b.node);
        tape->record(out, parents, [ga, gb](const Tensor& g, const std::vector<Tensor*>& pg) {
            int k = 0;
            if (ga) axpy(*pg[k++], 1.0, g);
            if (gb) axpy(*pg[k++], 1.0, g);
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    if (any_attached(tape, {&a, &b})) {
        std::vector<int> parents;
        bool ga = tape->attached(a), gb = tape->attached(b);
        if (ga) parents.push_back(a.node);
        if (gb) parents.push_back(b.node);
        tape->record(out, parents, [ga, gb](const Tensor& g, const std::vector<Tensor*>& pg) {
            int k = 0;
            if (ga) axpy(*pg[k++], 1.0, g);
            if (gb) axpy(*pg[k++], -1.0, g);
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    if (any_attached(tape, {&a, &b})) {
        std::vector<int> parents;
        bool ga = tape->attached(a), gb = tape->attached(b);
        if (ga) parents.push_back(a.node);
        if (gb) parents.push_back(b.node);
        Tensor sa = a, sb = b;  // saved values (shared storage, not copied)
        tape->record(out, parents, [ga, gb, sa, sb](const Tensor& g, const std::vector<Tensor*>& pg) {
            int k = 0;
            if (ga) {
                double* d = pg[k++]->data();
                const double* pg_ = g.data();
                const double* pb_ = sb.data();
                for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg_[i] * pb_[i];
            }
            if (gb) {
                double* d = pg[k++]->data();
                const double* pg_ = g.data();
                const double* pa_ = sa.data();
                for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg_[i] * pa_[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = c * pa[i];
    if (any_attached(tape, {&a})) {
        tape->record(out, {a.node}, [c](const Tensor& g, const std::vector<Tensor*>& pg) {
            axpy(*pg[0], c, g);
        });
    }
    return out;
}

Tensor leaky_relu(const Tensor& x, double slope, Tape* tape) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] >= 0.0 ? px[i] : slope * px[i];
    if (any_attached(tape, {&x})) {
        Tensor sx = x;
        tape->record(out, {x.node}, [slope, sx](const Tensor& g, const std::vector<Tensor*>& pg) {
            double* d = pg[0]->data();
            const double* pg_ = g.data();
            const double* px_ = sx.data();
            for (std::int64_t i = 0; i < g.numel(); ++i)
                d[i] += pg_[i] * (px_[i] >= 0.0 ? 1.0 : slope);
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = 1.0 / (1.0 + std::exp(-px[i]));
    if (any_attached(tape, {&x})) {
        Tensor sy = out;
        tape->record(out, {x.node}, [sy](const Tensor& g, const std::vector<Tensor*>& pg) {
            double* d = pg[0]->data();
            const double* pg_ = g.data();
            const double* py = sy.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg_[i] * py[i] * (1.0 - py[i]);
        });
    }
    return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
    double acc = 0.0;
    const double* px = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    Tensor out = Tensor::scalar(acc);
    if (any_attached(tape, {&x})) {
        tape->record(out, {x.node}, [](const Tensor& g, const std::vector<Tensor*>& pg) {
            double gv = g.value();
            double* d = pg[0]->data();
            for (std::int64_t i = 0; i < pg[0]->numel(); ++i) d[i] += gv;
        });
    }
    return out;
}

Tensor mean(const Tensor& x, Tape* tape) {
    double acc = 0.0;
    const double* px = x.data();
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (any_attached(tape, {&x})) {
        tape->record(out, {x.node}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
            double gv = g.value() / static_cast<double>(n);
            double* d = pg[0]->data();
            for (std::int64_t i = 0; i < n; ++i) d[i] += gv;
        });
    }
    return out;
}

Tensor downsample2(const Tensor& x, PoolMode mode, Tape* tape) {
    if (x.rank() != 4 && x.rank() != 5) {
        throw Error::shape("downsample2: expected rank 4 or 5, got " + std::to_string(x.rank()));
    }
    int spatial = x.rank() - 2;
    std::vector<std::int64_t> oshape = x.shape();
    for (int a = 2; a < x.rank(); ++a) {
        if (x.dim(a) % 2 != 0) {
            throw Error::shape("downsample2: odd spatial extent " + std::to_string(x.dim(a)) +
                               " at axis " + std::to_string(a));
        }
        oshape[static_cast<std::size_t>(a)] = x.dim(a) / 2;
    }
    Tensor out(oshape);

    std::int64_t bc = x.dim(0) * x.dim(1);
    std::int64_t id_ = spatial == 3 ? x.dim(2) : 1;
    std::int64_t ih = x.dim(x.rank() - 2), iw = x.dim(x.rank() - 1);
    std::int64_t od = spatial == 3 ? id_ / 2 : 1;
    std::int64_t oh = ih / 2, ow = iw / 2;
    std::int64_t in_plane = id_ * ih * iw;
    std::int64_t out_plane = od * oh * ow;
    double inv = spatial == 3 ? 0.125 : 0.25;

    std::vector<std::int64_t> argmax;
    if (mode == PoolMode::Max) argmax.assign(static_cast<std::size_t>(out.numel()), 0);

    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t p = 0; p < bc; ++p) {
        const double* src = px + p * in_plane;
        double* dst = po + p * out_plane;
        for (std::int64_t z = 0; z < od; ++z)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    std::int64_t o = (z * oh + y) * ow + xx;
                    if (mode == PoolMode::Mean) {
                        double acc = 0.0;
                        for (std::int64_t dz = 0; dz < (spatial == 3 ? 2 : 1); ++dz)
                            for (std::int64_t dy = 0; dy < 2; ++dy)
                                for (std::int64_t dx = 0; dx < 2; ++dx)
                                    acc += src[((2 * z + dz) * ih + 2 * y + dy) * iw + 2 * xx + dx];
                        dst[o] = acc * inv;
                    } else {
                        std::int64_t best = ((2 * z) * ih + 2 * y) * iw + 2 * xx;
                        double bv = src[best];
                        for (std::int64_t dz = 0; dz < (spatial == 3 ? 2 : 1); ++dz)
                            for (std::int64_t dy = 0; dy < 2; ++dy)
                                for (std::int64_t dx = 0; dx < 2; ++dx) {
                                    std::int64_t idx =
                                        ((2 * z + dz) * ih + 2 * y + dy) * iw + 2 * xx + dx;
                                    if (src[idx] > bv) {  // first max wins ties
                                        bv = src[idx];
                                        best = idx;
                                    }
                                }
                        dst[o] = bv;
                        argmax[static_cast<std::size_t>(p * out_plane + o)] = best;
                    }
                }
    }

    if (any_attached(tape, {&x})) {
        tape->record(out, {x.node},
                     [mode, bc, in_plane, out_plane, inv, argmax = std::move(argmax), spatial, ih,
                      iw, oh, ow, od](const Tensor& g, const std::vector<Tensor*>& pg) {
            const double* pgout = g.data();
            double* d = pg[0]->data();
            for (std::int64_t p = 0; p < bc; ++p) {
                const double* gsrc = pgout + p * out_plane;
                double* gdst = d + p * in_plane;
                for (std::int64_t z = 0; z < od; ++z)
                    for (std::int64_t y = 0; y < oh; ++y)
                        for (std::int64_t xx = 0; xx < ow; ++xx) {
                            std::int64_t o = (z * oh + y) * ow + xx;
                            if (mode == PoolMode::Mean) {
                                double gv = gsrc[o] * inv;
                                for (std::int64_t dz = 0; dz < (spatial == 3 ? 2 : 1); ++dz)
                                    for (std::int64_t dy = 0; dy < 2; ++dy)
                                        for (std::int64_t dx = 0; dx < 2; ++dx)
                                            gdst[((2 * z + dz) * ih + 2 * y + dy) * iw + 2 * xx +
                                                 dx] += gv;
                            } else {
                                gdst[argmax[static_cast<std::size_t>(p * out_plane + o)]] += gsrc[o];
                            }
                        }
            }
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.rank() != b.rank() || a.rank() < 3) {
        throw Error::shape("concat_channels: rank mismatch or rank < 3");
    }
    for (int i = 0; i < a.rank(); ++i) {
        if (i != 1 && a.dim(i) != b.dim(i)) {
            throw Error::shape("concat_channels: extent mismatch at axis " + std::to_string(i) +
                               " (" + std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)) +
                               ")");
        }
    }
    std::vector<std::int64_t> oshape = a.shape();
    oshape[1] = a.dim(1) + b.dim(1);
    Tensor out(oshape);

    std::int64_t batch = a.dim(0);
    std::int64_t plane = 1;
    for (int i = 2; i < a.rank(); ++i) plane *= a.dim(i);
    std::int64_t ca = a.dim(1) * plane, cb = b.dim(1) * plane;

    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t n = 0; n < batch; ++n) {
        std::copy(pa + n * ca, pa + (n + 1) * ca, po + n * (ca + cb));
        std::copy(pb + n * cb, pb + (n + 1) * cb, po + n * (ca + cb) + ca);
    }

    if (any_attached(tape, {&a, &b})) {
        std::vector<int> parents;
        bool ga = tape->attached(a), gb = tape->attached(b);
        if (ga) parents.push_back(a.node);
        if (gb) parents.push_back(b.node);
        tape->record(out, parents,
                     [ga, gb, batch, ca, cb](const Tensor& g, const std::vector<Tensor*>& pg) {
            const double* pg_ = g.data();
            int k = 0;
            if (ga) {
                double* d = pg[k++]->data();
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t i = 0; i < ca; ++i) d[n * ca + i] += pg_[n * (ca + cb) + i];
            }
            if (gb) {
                double* d = pg[k++]->data();
                for (std::int64_t n = 0; n < batch; ++n)
                    for (std::int64_t i = 0; i < cb; ++i)
                        d[n * cb + i] += pg_[n * (ca + cb) + ca + i];
            }
        });
    }
    return out;
}

}  // namespace mgpde
