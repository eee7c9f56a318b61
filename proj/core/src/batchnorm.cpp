#include "mgpde/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mgpde {

namespace {

struct BNGeom {
    std::int64_t batch, channels, spatial;
};

BNGeom bn_geom(const Tensor& input, const Tensor& gamma, const Tensor& beta,
               const BNState& state) {
    if (input.rank() < 2) throw Error::shape("batchnorm: input rank must be >= 2");
    BNGeom g{input.dim(0), input.dim(1), 1};
    for (int i = 2; i < input.rank(); ++i) g.spatial *= input.dim(i);
    auto check = [&](const Tensor& t, const char* name) {
        if (t.rank() != 1 || t.dim(0) != g.channels) {
            throw Error::shape(std::string("batchnorm: ") + name + " length " +
                               std::to_string(t.defined() ? t.dim(0) : 0) +
                               " does not match channel count " + std::to_string(g.channels) +
                               " at axis 1");
        }
    };
    check(gamma, "gamma");
    check(beta, "beta");
    check(state.running_mean, "running_mean");
    check(state.running_var, "running_var");
    return g;
}

}  // namespace

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BNState& state,
                 bool training, double momentum, Tape* tape, const StatReducer* sync) {
    BNGeom g = bn_geom(input, gamma, beta, state);
    std::int64_t plane = g.spatial;
    std::int64_t local_count = g.batch * plane;

    // Per-channel mean and variance: batch statistics in training mode,
    // running statistics in eval mode. With a reducer the per-worker moments
    // are averaged, yielding the statistics of the union mini-batch (local
    // counts are equal across workers by the partition contract).
    std::vector<double> mu(static_cast<std::size_t>(g.channels));
    std::vector<double> var(static_cast<std::size_t>(g.channels));
    const double* px = input.data();

    if (training) {
        std::vector<double> moments(static_cast<std::size_t>(2 * g.channels), 0.0);
        for (std::int64_t b = 0; b < g.batch; ++b)
            for (std::int64_t c = 0; c < g.channels; ++c) {
                const double* p = px + (b * g.channels + c) * plane;
                double s = 0.0, sq = 0.0;
                for (std::int64_t i = 0; i < plane; ++i) {
                    s += p[i];
                    sq += p[i] * p[i];
                }
                moments[static_cast<std::size_t>(c)] += s;
                moments[static_cast<std::size_t>(g.channels + c)] += sq;
            }
        for (std::int64_t c = 0; c < 2 * g.channels; ++c)
            moments[static_cast<std::size_t>(c)] /= static_cast<double>(local_count);
        if (sync) sync->average(moments);
        for (std::int64_t c = 0; c < g.channels; ++c) {
            mu[static_cast<std::size_t>(c)] = moments[static_cast<std::size_t>(c)];
            double v = moments[static_cast<std::size_t>(g.channels + c)] -
                       mu[static_cast<std::size_t>(c)] * mu[static_cast<std::size_t>(c)];
            var[static_cast<std::size_t>(c)] = std::max(v, 0.0);
        }
        double* rm = state.running_mean.data();
        double* rv = state.running_var.data();
        for (std::int64_t c = 0; c < g.channels; ++c) {
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[static_cast<std::size_t>(c)];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        const double* rm = state.running_mean.data();
        const double* rv = state.running_var.data();
        for (std::int64_t c = 0; c < g.channels; ++c) {
            mu[static_cast<std::size_t>(c)] = rm[c];
            var[static_cast<std::size_t>(c)] = rv[c];
        }
    }

    std::vector<double> inv_std(static_cast<std::size_t>(g.channels));
    for (std::int64_t c = 0; c < g.channels; ++c)
        inv_std[static_cast<std::size_t>(c)] =
            1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + kBatchNormEps);

    Tensor xhat(input.shape());
    Tensor out(input.shape());
    {
        const double* pg_ = gamma.data();
        const double* pb = beta.data();
        double* ph = xhat.data();
        double* po = out.data();
        for (std::int64_t b = 0; b < g.batch; ++b)
            for (std::int64_t c = 0; c < g.channels; ++c) {
                std::int64_t base = (b * g.channels + c) * plane;
                double m = mu[static_cast<std::size_t>(c)];
                double is = inv_std[static_cast<std::size_t>(c)];
                for (std::int64_t i = 0; i < plane; ++i) {
                    double h = (px[base + i] - m) * is;
                    ph[base + i] = h;
                    po[base + i] = pg_[c] * h + pb[c];
                }
            }
    }

    bool gi = tape && tape->attached(input);
    bool gg = tape && tape->attached(gamma);
    bool gb = tape && tape->attached(beta);
    if (gi || gg || gb) {
        std::vector<int> parents;
        if (gi) parents.push_back(input.node);
        if (gg) parents.push_back(gamma.node);
        if (gb) parents.push_back(beta.node);
        Tensor sgamma = gamma;
        tape->record(out, parents,
                     [g, plane, gi, gg, gb, training, sync, xhat, sgamma, inv_std,
                      local_count](const Tensor& gout, const std::vector<Tensor*>& pg) {
            int k = 0;
            double* din = gi ? pg[k++]->data() : nullptr;
            double* dgamma = gg ? pg[k++]->data() : nullptr;
            double* dbeta = gb ? pg[k++]->data() : nullptr;
            const double* go = gout.data();
            const double* ph = xhat.data();
            const double* pgm = sgamma.data();

            // Per-channel reduction terms: sum(g) and sum(g*xhat).
            std::vector<double> s1(static_cast<std::size_t>(g.channels), 0.0);
            std::vector<double> s2(static_cast<std::size_t>(g.channels), 0.0);
            for (std::int64_t b = 0; b < g.batch; ++b)
                for (std::int64_t c = 0; c < g.channels; ++c) {
                    std::int64_t base = (b * g.channels + c) * plane;
                    double a1 = 0.0, a2 = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        a1 += go[base + i];
                        a2 += go[base + i] * ph[base + i];
                    }
                    s1[static_cast<std::size_t>(c)] += a1;
                    s2[static_cast<std::size_t>(c)] += a2;
                }
            if (dgamma)
                for (std::int64_t c = 0; c < g.channels; ++c)
                    dgamma[c] += s2[static_cast<std::size_t>(c)];
            if (dbeta)
                for (std::int64_t c = 0; c < g.channels; ++c)
                    dbeta[c] += s1[static_cast<std::size_t>(c)];
            if (!din) return;

            if (!training) {
                // Running statistics are constants: plain affine backward.
                for (std::int64_t b = 0; b < g.batch; ++b)
                    for (std::int64_t c = 0; c < g.channels; ++c) {
                        std::int64_t base = (b * g.channels + c) * plane;
                        double f = pgm[c] * inv_std[static_cast<std::size_t>(c)];
                        for (std::int64_t i = 0; i < plane; ++i) din[base + i] += f * go[base + i];
                    }
                return;
            }

            // Batch statistics depend on the input. The averaged reduction
            // terms make the worker-local formula equal to the union-batch
            // backward (divisor stays the local element count).
            std::vector<double> r(static_cast<std::size_t>(2 * g.channels));
            for (std::int64_t c = 0; c < g.channels; ++c) {
                r[static_cast<std::size_t>(c)] = s1[static_cast<std::size_t>(c)];
                r[static_cast<std::size_t>(g.channels + c)] = s2[static_cast<std::size_t>(c)];
            }
            if (sync) sync->average(r);
            double inv_m = 1.0 / static_cast<double>(local_count);
            for (std::int64_t b = 0; b < g.batch; ++b)
                for (std::int64_t c = 0; c < g.channels; ++c) {
                    std::int64_t base = (b * g.channels + c) * plane;
                    double f = pgm[c] * inv_std[static_cast<std::size_t>(c)];
                    double m1 = r[static_cast<std::size_t>(c)] * inv_m;
                    double m2 = r[static_cast<std::size_t>(g.channels + c)] * inv_m;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        din[base + i] += f * (go[base + i] - m1 - ph[base + i] * m2);
                    }
                }
        });
    }
    return out;
}

}  // namespace mgpde
