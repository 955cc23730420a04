// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Codebook lookup for the occupancy latents: nearest-entry quantization with a straight-through
// gradient, the codebook/commitment loss, and Gumbel-softmax selection.
//
#pragma once

#include <dids/sparse/ops.hpp>

#include <cmath>
#include <limits>
#include <vector>

namespace dids {

template <typename T>
struct Codebook {
    int size = 0; // K
    int dim = 0;  // d
    Param<T> entries; // [K, d]

    Codebook() = default;
    Codebook(const std::string& name, int k, int d, Rng& rng, double init_scale = 1.0)
        : size(k), dim(d), entries(name + ".entries", {k, d}) {
        DIDS_CHECK(k >= 1 && d >= 1, "codebook needs K >= 1 and d >= 1");
        entries.fill_normal(rng, init_scale);
    }

    const T* entry(int idx) const { return entries.value.data() + std::size_t(idx) * dim; }
    void collect(ParamList<T>& p) { p.push_back(&entries); }
};

/// Quantized latent level: the codebook vectors per voxel and their indices.
struct LatentVolume {
    int level = 1;
    SparseVolume volume;
    std::vector<int> indices; // per row; empty before quantization

    const OccupancyMask& mask() const { return volume.mask(); }
};

template <typename T>
struct Quantized {
    BasicSparseVolume<T> zq;
    std::vector<int> indices;
};

/// Per-voxel nearest codebook entry in Euclidean distance; ties go to the lowest index.
template <typename T>
Quantized<T> quantize(const BasicSparseVolume<T>& z, const Codebook<T>& cb) {
    DIDS_CHECK(z.channels() == cb.dim, "latent channels must equal the codebook dimension");
    Quantized<T> q{z.zeros_like(), std::vector<int>(z.size(), 0)};
    for (std::size_t r = 0; r < z.size(); ++r) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int e = 0; e < cb.size; ++e) {
            const T* c = cb.entry(e);
            double d2 = 0;
            for (int k = 0; k < cb.dim; ++k) {
                const double diff = double(z.at(r, k)) - double(c[k]);
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                arg = e;
            }
        }
        q.indices[r] = arg;
        std::copy_n(cb.entry(arg), cb.dim, q.zq.row(r).begin());
    }
    return q;
}

/// Codebook vectors for given indices on a mask.
template <typename T>
BasicSparseVolume<T> embed_indices(const OccupancyMask& mask, const std::vector<int>& indices, const Codebook<T>& cb) {
    DIDS_CHECK(indices.size() == mask.size(), "index count must match the mask");
    BasicSparseVolume<T> v(mask, cb.dim);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        DIDS_CHECK(indices[r] >= 0 && indices[r] < cb.size, "codebook index out of range");
        std::copy_n(cb.entry(indices[r]), cb.dim, v.row(r).begin());
    }
    return v;
}

/// ||sg(z) - zq||^2 + beta ||z - sg(zq)||^2, averaged over voxels and channels. Adds the codebook
/// gradient into `cb.entries.grad` and the commitment gradient into `gz`.
template <typename T>
double vq_codebook_loss(const BasicSparseVolume<T>& z, const Quantized<T>& q, Codebook<T>& cb, double beta,
                        BasicSparseVolume<T>& gz, double weight = 1.0) {
    if (z.empty())
        return 0.0;
    const double n = double(z.data().size());
    double s = 0;
    for (std::size_t r = 0; r < z.size(); ++r) {
        T* ge = cb.entries.grad.data() + std::size_t(q.indices[r]) * cb.dim;
        for (int k = 0; k < cb.dim; ++k) {
            const double d = double(z.at(r, k)) - double(q.zq.at(r, k));
            s += d * d;
            ge[k] += T(weight * -2.0 * d / n);
            gz.at(r, k) += T(weight * beta * 2.0 * d / n);
        }
    }
    return (1.0 + beta) * s / n;
}

/// Soft codebook assignment from logits. In training mode the weights are
/// softmax((logits + g) / tau) with Gumbel noise g; in inference mode (rng == nullptr) the
/// assignment is the hard argmax of the logits.
template <typename T>
struct GumbelQuantized {
    BasicSparseVolume<T> zq;
    std::vector<int> indices;
    std::vector<double> weights; // [n, K]; empty in inference mode
    double tau = 1.0;
};

template <typename T>
GumbelQuantized<T> gumbel_quantize(const BasicSparseVolume<T>& logits, const Codebook<T>& cb, double tau, Rng* rng) {
    DIDS_CHECK(tau > 0.0, "Gumbel temperature must be positive");
    DIDS_CHECK(logits.channels() == cb.size, "logit channels must equal the codebook size");
    const int kk = cb.size;
    GumbelQuantized<T> g{BasicSparseVolume<T>(logits.mask(), cb.dim), std::vector<int>(logits.size(), 0), {}, tau};
    if (rng)
        g.weights.assign(logits.size() * std::size_t(kk), 0.0);
    std::vector<double> y(kk);
    for (std::size_t r = 0; r < logits.size(); ++r) {
        for (int e = 0; e < kk; ++e) {
            double v = double(logits.at(r, e));
            if (rng) {
                const double u = std::max(rng->uniform(), 1e-300);
                v += -std::log(-std::log(u) + 1e-300);
            }
            y[e] = v;
        }
        const int arg = int(std::max_element(y.begin(), y.end()) - y.begin());
        g.indices[r] = arg;
        if (!rng) {
            std::copy_n(cb.entry(arg), cb.dim, g.zq.row(r).begin());
            continue;
        }
        const double top = y[arg];
        double z = 0;
        for (int e = 0; e < kk; ++e)
            z += (y[e] = std::exp((y[e] - top) / tau));
        double* w = g.weights.data() + r * std::size_t(kk);
        for (int e = 0; e < kk; ++e) {
            w[e] = y[e] / z;
            const T* c = cb.entry(e);
            for (int k = 0; k < cb.dim; ++k)
                g.zq.at(r, k) += T(w[e] * double(c[k]));
        }
    }
    return g;
}

/// Backward of the soft assignment: returns d/d(logits) and adds d/d(codebook).
template <typename T>
BasicSparseVolume<T> gumbel_backward(const GumbelQuantized<T>& g, const BasicSparseVolume<T>& gzq, Codebook<T>& cb) {
    DIDS_CHECK(!g.weights.empty() || g.zq.empty(), "Gumbel backward requires a training-mode assignment");
    const int kk = cb.size;
    BasicSparseVolume<T> gl(g.zq.mask(), kk);
    std::vector<double> gw(kk);
    for (std::size_t r = 0; r < g.zq.size(); ++r) {
        const double* w = g.weights.data() + r * std::size_t(kk);
        double dot = 0;
        for (int e = 0; e < kk; ++e) {
            const T* c = cb.entry(e);
            T* gc = cb.entries.grad.data() + std::size_t(e) * cb.dim;
            double s = 0;
            for (int k = 0; k < cb.dim; ++k) {
                s += double(gzq.at(r, k)) * double(c[k]);
                gc[k] += T(w[e] * double(gzq.at(r, k)));
            }
            gw[e] = s;
            dot += w[e] * s;
        }
        for (int e = 0; e < kk; ++e)
            gl.at(r, e) = T(w[e] * (gw[e] - dot) / g.tau);
    }
    return gl;
}

/// KL(softmax(logits) || uniform) averaged over voxels; adds weight * gradient into `gl`.
template <typename T>
double gumbel_kl_loss(const BasicSparseVolume<T>& logits, BasicSparseVolume<T>& gl, double weight) {
    if (logits.empty())
        return 0.0;
    const int kk = logits.channels();
    const double n = double(logits.size());
    double total = 0;
    std::vector<double> p(kk);
    for (std::size_t r = 0; r < logits.size(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int e = 0; e < kk; ++e)
            mx = std::max(mx, double(logits.at(r, e)));
        double z = 0;
        for (int e = 0; e < kk; ++e)
            z += (p[e] = std::exp(double(logits.at(r, e)) - mx));
        double kl = std::log(double(kk));
        for (int e = 0; e < kk; ++e) {
            p[e] /= z;
            if (p[e] > 0)
                kl += p[e] * std::log(p[e]);
        }
        total += kl;
        // d KL / d l_e = p_e (log p_e - sum_j p_j log p_j)
        const double ent = kl - std::log(double(kk));
        for (int e = 0; e < kk; ++e) {
            const double lp = p[e] > 0 ? std::log(p[e]) : 0.0;
            gl.at(r, e) += T(weight * p[e] * (lp - ent) / n);
        }
    }
    return total / n;
}

} // namespace dids
