// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Sparse neural operations. Every layer is stateless across calls: `forward` is const and safe to
// call concurrently; `backward(input, grad_out)` recomputes what it needs from the forward input,
// accumulates parameter gradients and returns the gradient with respect to the input.
//
#pragma once

#include <dids/sparse/param.hpp>
#include <dids/sparse/volume.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace dids {

namespace detail {

inline int child_offset(const VoxelCoord& c, int f) { return ((c.i % f) * f + (c.j % f)) * f + (c.k % f); }

inline VoxelCoord parent_of(const VoxelCoord& c, int f) { return {c.i / f, c.j / f, c.k / f}; }

template <typename T>
void check_param_shape(const Param<T>& p, const std::vector<int>& shape) {
    DIDS_CHECK(p.shape == shape, "parameter '" + p.name + "' has unexpected shape");
}

// y[out] += x[in] * W   with x row length cin, W (cin x cout) row-major.
template <typename T>
inline void gemv_acc(const T* x, const T* w, T* y, int cin, int cout) {
    for (int ci = 0; ci < cin; ++ci) {
        const T xv = x[ci];
        const T* wr = w + std::size_t(ci) * cout;
        for (int co = 0; co < cout; ++co)
            y[co] += xv * wr[co];
    }
}

// gx[ci] += sum_co gy[co] W[ci, co];  gW[ci, co] += x[ci] gy[co]
template <typename T>
inline void gemv_back(const T* x, const T* w, const T* gy, T* gx, T* gw, int cin, int cout) {
    for (int ci = 0; ci < cin; ++ci) {
        const T* wr = w + std::size_t(ci) * cout;
        T* gwr = gw + std::size_t(ci) * cout;
        const T xv = x[ci];
        T acc = 0;
        for (int co = 0; co < cout; ++co) {
            acc += gy[co] * wr[co];
            gwr[co] += xv * gy[co];
        }
        gx[ci] += acc;
    }
}

} // namespace detail

/// Submanifold 3D convolution: output active set equals input active set; each output sums
/// the kernel taps whose neighbor is active.
template <typename T>
struct Conv3d {
    int cin = 0, cout = 0, ksize = 3;
    Param<T> weight; // [k^3, cin, cout]
    Param<T> bias;   // [cout]

    Conv3d() = default;
    Conv3d(const std::string& name, int in_ch, int out_ch, int k, Rng& rng, double gain = 1.0)
        : cin(in_ch), cout(out_ch), ksize(k), weight(name + ".weight", {k * k * k, in_ch, out_ch}),
          bias(name + ".bias", {out_ch}) {
        DIDS_CHECK(k > 0 && k % 2 == 1, "convolution kernel size must be odd");
        weight.fill_normal(rng, gain * std::sqrt(2.0 / double(k * k * k * in_ch)));
    }

    void validate(const BasicSparseVolume<T>& x) const {
        DIDS_CHECK(ksize % 2 == 1, "convolution kernel size must be odd");
        DIDS_CHECK(x.channels() == cin, "conv3d channel mismatch");
        detail::check_param_shape(weight, {ksize * ksize * ksize, cin, cout});
        detail::check_param_shape(bias, {cout});
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x) const {
        validate(x);
        BasicSparseVolume<T> y(x.mask(), cout);
        auto& yd = y.data();
        for (std::size_t r = 0; r < y.size(); ++r)
            std::copy(bias.value.begin(), bias.value.end(), yd.begin() + r * cout);
        if (x.empty())
            return y;
        const auto nmap = x.mask().topology()->neighbor_map(ksize);
        const T* xd = x.data().data();
        for (std::size_t o = 0; o < nmap->pairs.size(); ++o) {
            const T* w = weight.value.data() + o * cin * cout;
            for (const auto& [out, in] : nmap->pairs[o])
                detail::gemv_acc(xd + std::size_t(in) * cin, w, yd.data() + std::size_t(out) * cout, cin, cout);
        }
        return y;
    }

    BasicSparseVolume<T> backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
        validate(x);
        BasicSparseVolume<T> gx(x.mask(), cin);
        for (std::size_t r = 0; r < gy.size(); ++r)
            for (int c = 0; c < cout; ++c)
                bias.grad[c] += gy.at(r, c);
        if (x.empty())
            return gx;
        const auto nmap = x.mask().topology()->neighbor_map(ksize);
        for (std::size_t o = 0; o < nmap->pairs.size(); ++o) {
            const T* w = weight.value.data() + o * cin * cout;
            T* gw = weight.grad.data() + o * cin * cout;
            for (const auto& [out, in] : nmap->pairs[o])
                detail::gemv_back(x.data().data() + std::size_t(in) * cin, w, gy.data().data() + std::size_t(out) * cout,
                                  gx.data().data() + std::size_t(in) * cin, gw, cin, cout);
        }
        return gx;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

/// Strided convolution with a factor^3 kernel over the active children of each parent cell.
/// The output active set is the max-pool of the input mask.
template <typename T>
struct Downsample {
    int cin = 0, cout = 0, factor = 2;
    Param<T> weight; // [factor^3, cin, cout]
    Param<T> bias;

    Downsample() = default;
    Downsample(const std::string& name, int in_ch, int out_ch, Rng& rng, int f = 2)
        : cin(in_ch), cout(out_ch), factor(f), weight(name + ".weight", {f * f * f, in_ch, out_ch}),
          bias(name + ".bias", {out_ch}) {
        weight.fill_normal(rng, std::sqrt(2.0 / double(f * f * f * in_ch)));
    }

    void validate(const BasicSparseVolume<T>& x) const {
        DIDS_CHECK(x.channels() == cin, "downsample channel mismatch");
        DIDS_CHECK(x.extent().divisible_by(factor), "extent not divisible by downsample factor");
        detail::check_param_shape(weight, {factor * factor * factor, cin, cout});
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x) const {
        validate(x);
        BasicSparseVolume<T> y(x.mask().maxpool(factor), cout);
        for (std::size_t r = 0; r < y.size(); ++r)
            std::copy(bias.value.begin(), bias.value.end(), y.data().begin() + r * cout);
        const auto& coords = x.mask().coords();
        for (std::size_t r = 0; r < coords.size(); ++r) {
            const int p = y.mask().find(detail::parent_of(coords[r], factor));
            const int o = detail::child_offset(coords[r], factor);
            detail::gemv_acc(x.row(r).data(), weight.value.data() + std::size_t(o) * cin * cout, y.row(std::size_t(p)).data(), cin,
                             cout);
        }
        return y;
    }

    /// Gradient w.r.t. the input; `gy` lives on maxpool(x.mask()).
    BasicSparseVolume<T> backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
        validate(x);
        BasicSparseVolume<T> gx(x.mask(), cin);
        for (std::size_t r = 0; r < gy.size(); ++r)
            for (int c = 0; c < cout; ++c)
                bias.grad[c] += gy.at(r, c);
        const auto& coords = x.mask().coords();
        for (std::size_t r = 0; r < coords.size(); ++r) {
            const int p = gy.mask().find(detail::parent_of(coords[r], factor));
            const int o = detail::child_offset(coords[r], factor);
            detail::gemv_back(x.row(r).data(), weight.value.data() + std::size_t(o) * cin * cout, gy.row(std::size_t(p)).data(),
                              gx.row(r).data(), weight.grad.data() + std::size_t(o) * cin * cout, cin, cout);
        }
        return gx;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

/// Transposed strided convolution onto a caller-chosen set of child voxels. Each target voxel
/// reads its parent through the kernel tap selected by its position inside the parent cell.
template <typename T>
struct Upsample {
    int cin = 0, cout = 0, factor = 2;
    Param<T> weight; // [factor^3, cin, cout]
    Param<T> bias;

    Upsample() = default;
    Upsample(const std::string& name, int in_ch, int out_ch, Rng& rng, int f = 2)
        : cin(in_ch), cout(out_ch), factor(f), weight(name + ".weight", {f * f * f, in_ch, out_ch}),
          bias(name + ".bias", {out_ch}) {
        weight.fill_normal(rng, std::sqrt(2.0 / double(in_ch)));
    }

    void validate(const BasicSparseVolume<T>& x, const OccupancyMask& target) const {
        DIDS_CHECK(x.channels() == cin, "upsample channel mismatch");
        DIDS_CHECK(target.extent() == x.extent().refined(factor), "upsample target extent must be input extent x factor");
        detail::check_param_shape(weight, {factor * factor * factor, cin, cout});
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, const OccupancyMask& target) const {
        validate(x, target);
        BasicSparseVolume<T> y(target, cout);
        const auto& coords = target.coords();
        for (std::size_t r = 0; r < coords.size(); ++r) {
            const int p = x.mask().find(detail::parent_of(coords[r], factor));
            DIDS_CHECK(p >= 0, "upsample target voxel has an inactive parent");
            const int o = detail::child_offset(coords[r], factor);
            auto yr = y.row(r);
            std::copy(bias.value.begin(), bias.value.end(), yr.begin());
            detail::gemv_acc(x.row(std::size_t(p)).data(), weight.value.data() + std::size_t(o) * cin * cout, yr.data(), cin, cout);
        }
        return y;
    }

    BasicSparseVolume<T> backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
        validate(x, gy.mask());
        BasicSparseVolume<T> gx(x.mask(), cin);
        const auto& coords = gy.mask().coords();
        for (std::size_t r = 0; r < coords.size(); ++r) {
            const int p = x.mask().find(detail::parent_of(coords[r], factor));
            const int o = detail::child_offset(coords[r], factor);
            for (int c = 0; c < cout; ++c)
                bias.grad[c] += gy.at(r, c);
            detail::gemv_back(x.row(std::size_t(p)).data(), weight.value.data() + std::size_t(o) * cin * cout, gy.row(r).data(),
                              gx.row(std::size_t(p)).data(), weight.grad.data() + std::size_t(o) * cin * cout, cin, cout);
        }
        return gx;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

/// Group normalization with statistics over the active voxels of one volume.
template <typename T>
struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-5;
    Param<T> scale; // [channels]
    Param<T> shift; // [channels]

    GroupNorm() = default;
    GroupNorm(const std::string& name, int ch, int g = 32, double e = 1e-5)
        : channels(ch), groups(g), eps(e), scale(name + ".scale", {ch}), shift(name + ".shift", {ch}) {
        scale.fill(T(1));
    }

    /// Toy-width networks use min(32, channels) groups.
    static int default_groups(int ch) { return std::min(32, ch); }

    struct Stats {
        std::vector<double> mean, rstd;
    };

    Stats stats(const BasicSparseVolume<T>& x) const {
        DIDS_CHECK(x.channels() == channels, "group norm channel mismatch");
        DIDS_CHECK(groups > 0 && channels % groups == 0, "channels must be divisible by groups");
        DIDS_CHECK(!x.empty(), "group norm requires at least one active voxel");
        const int gs = channels / groups;
        Stats s{std::vector<double>(groups, 0.0), std::vector<double>(groups, 0.0)};
        std::vector<double> sq(groups, 0.0);
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int c = 0; c < channels; ++c) {
                const double v = double(x.at(r, c));
                s.mean[c / gs] += v;
            }
        const double n = double(x.size()) * gs;
        for (auto& m : s.mean)
            m /= n;
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int c = 0; c < channels; ++c) {
                const double d = double(x.at(r, c)) - s.mean[c / gs];
                sq[c / gs] += d * d;
            }
        for (int g = 0; g < groups; ++g)
            s.rstd[g] = 1.0 / std::sqrt(sq[g] / n + eps);
        return s;
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x) const {
        const auto s = stats(x);
        const int gs = channels / groups;
        BasicSparseVolume<T> y(x.mask(), channels);
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int c = 0; c < channels; ++c) {
                const int g = c / gs;
                y.at(r, c) = T((double(x.at(r, c)) - s.mean[g]) * s.rstd[g] * double(scale.value[c]) + double(shift.value[c]));
            }
        return y;
    }

    BasicSparseVolume<T> backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
        const auto s = stats(x);
        const int gs = channels / groups;
        const double n = double(x.size()) * gs;
        std::vector<double> sum_g(groups, 0.0), sum_gx(groups, 0.0);
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int c = 0; c < channels; ++c) {
                const int g = c / gs;
                const double xhat = (double(x.at(r, c)) - s.mean[g]) * s.rstd[g];
                const double gyv = double(gy.at(r, c));
                scale.grad[c] += T(gyv * xhat);
                shift.grad[c] += T(gyv);
                const double gh = gyv * double(scale.value[c]);
                sum_g[g] += gh;
                sum_gx[g] += gh * xhat;
            }
        BasicSparseVolume<T> gx(x.mask(), channels);
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int c = 0; c < channels; ++c) {
                const int g = c / gs;
                const double xhat = (double(x.at(r, c)) - s.mean[g]) * s.rstd[g];
                const double gh = double(gy.at(r, c)) * double(scale.value[c]);
                gx.at(r, c) = T(s.rstd[g] / n * (n * gh - sum_g[g] - xhat * sum_gx[g]));
            }
        return gx;
    }

    void collect(ParamList<T>& out) {
        out.push_back(&scale);
        out.push_back(&shift);
    }
};

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
BasicSparseVolume<T> silu(const BasicSparseVolume<T>& x) {
    BasicSparseVolume<T> y = x.zeros_like();
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const T v = x.data()[i];
        y.data()[i] = v * sigmoid(v);
    }
    return y;
}

template <typename T>
BasicSparseVolume<T> silu_backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
    BasicSparseVolume<T> gx = x.zeros_like();
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const T v = x.data()[i];
        const T s = sigmoid(v);
        gx.data()[i] = gy.data()[i] * s * (T(1) + v * (T(1) - s));
    }
    return gx;
}

/// Dense affine map on plain vectors (used by the time-embedding MLP and heads).
template <typename T>
struct Linear {
    int in = 0, out = 0;
    Param<T> weight; // [in, out]
    Param<T> bias;   // [out]

    Linear() = default;
    Linear(const std::string& name, int i, int o, Rng& rng, double gain = 1.0)
        : in(i), out(o), weight(name + ".weight", {i, o}), bias(name + ".bias", {o}) {
        weight.fill_normal(rng, gain / std::sqrt(double(i)));
    }

    std::vector<T> forward(const std::vector<T>& x) const {
        DIDS_CHECK(int(x.size()) == in, "linear input size mismatch");
        std::vector<T> y(bias.value);
        detail::gemv_acc(x.data(), weight.value.data(), y.data(), in, out);
        return y;
    }

    std::vector<T> backward(const std::vector<T>& x, const std::vector<T>& gy) {
        std::vector<T> gx(in, T(0));
        for (int o = 0; o < out; ++o)
            bias.grad[o] += gy[o];
        detail::gemv_back(x.data(), weight.value.data(), gy.data(), gx.data(), weight.grad.data(), in, out);
        return gx;
    }

    void collect(ParamList<T>& outp) {
        outp.push_back(&weight);
        outp.push_back(&bias);
    }
};

template <typename T>
std::vector<T> silu_vec(const std::vector<T>& x) {
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] * sigmoid(x[i]);
    return y;
}

template <typename T>
std::vector<T> silu_vec_backward(const std::vector<T>& x, const std::vector<T>& gy) {
    std::vector<T> gx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T s = sigmoid(x[i]);
        gx[i] = gy[i] * s * (T(1) + x[i] * (T(1) - s));
    }
    return gx;
}

/// Multi-head softmax self-attention over all active voxels of one volume, with residual:
///   out = x + (softmax(Q K^T / sqrt(d_head)) V) W_o + b_o,   Q = x W_q + b_q, ...
template <typename T>
struct SparseAttention {
    int channels = 0, heads = 1;
    std::size_t max_voxels = 4096;
    Param<T> wq, wk, wv, wo; // [C, C]
    Param<T> bq, bk, bv, bo; // [C]

    SparseAttention() = default;
    SparseAttention(const std::string& name, int ch, int h, Rng& rng, std::size_t cap = 4096)
        : channels(ch), heads(h), max_voxels(cap), wq(name + ".wq", {ch, ch}), wk(name + ".wk", {ch, ch}),
          wv(name + ".wv", {ch, ch}), wo(name + ".wo", {ch, ch}), bq(name + ".bq", {ch}), bk(name + ".bk", {ch}),
          bv(name + ".bv", {ch}), bo(name + ".bo", {ch}) {
        DIDS_CHECK(h > 0 && ch % h == 0, "attention channels must be divisible by heads");
        const double s = 1.0 / std::sqrt(double(ch));
        wq.fill_normal(rng, s);
        wk.fill_normal(rng, s);
        wv.fill_normal(rng, s);
        wo.fill_normal(rng, s);
    }

    struct Cache {
        std::vector<T> q, k, v, o; // [n, C]
        std::vector<T> p;          // [heads, n, n]
    };

    void validate(const BasicSparseVolume<T>& x) const {
        DIDS_CHECK(x.channels() == channels, "attention channel mismatch");
        DIDS_CHECK(x.size() <= max_voxels, "active voxel count exceeds attention cap");
    }

    static std::vector<T> project(const BasicSparseVolume<T>& x, const Param<T>& w, const Param<T>& b) {
        const int c = x.channels();
        std::vector<T> y(x.size() * c);
        for (std::size_t r = 0; r < x.size(); ++r) {
            std::copy(b.value.begin(), b.value.end(), y.begin() + r * c);
            detail::gemv_acc(x.row(r).data(), w.value.data(), y.data() + r * c, c, c);
        }
        return y;
    }

    Cache compute(const BasicSparseVolume<T>& x) const {
        validate(x);
        const std::size_t n = x.size();
        const int c = channels, dh = channels / heads;
        Cache cache{project(x, wq, bq), project(x, wk, bk), project(x, wv, bv), std::vector<T>(n * c, T(0)),
                    std::vector<T>(std::size_t(heads) * n * n)};
        const double scale = 1.0 / std::sqrt(double(dh));
        std::vector<double> srow(n);
        for (int h = 0; h < heads; ++h) {
            T* P = cache.p.data() + std::size_t(h) * n * n;
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -1e300;
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0;
                    for (int d = 0; d < dh; ++d)
                        s += double(cache.q[i * c + h * dh + d]) * double(cache.k[j * c + h * dh + d]);
                    srow[j] = s * scale;
                    mx = std::max(mx, srow[j]);
                }
                double z = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    srow[j] = std::exp(srow[j] - mx);
                    z += srow[j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    P[i * n + j] = T(srow[j] / z);
                    const T pij = P[i * n + j];
                    for (int d = 0; d < dh; ++d)
                        cache.o[i * c + h * dh + d] += pij * cache.v[j * c + h * dh + d];
                }
            }
        }
        return cache;
    }

    /// Attention probabilities of head `h`, row-major [n, n].
    std::vector<T> weights(const BasicSparseVolume<T>& x, int h = 0) const {
        auto cache = compute(x);
        const std::size_t n = x.size();
        return {cache.p.begin() + std::ptrdiff_t(h * n * n), cache.p.begin() + std::ptrdiff_t((h + 1) * n * n)};
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x) const {
        const auto cache = compute(x);
        BasicSparseVolume<T> y = x;
        const int c = channels;
        for (std::size_t r = 0; r < x.size(); ++r) {
            auto yr = y.row(r);
            for (int k = 0; k < c; ++k)
                yr[k] += bo.value[k];
            detail::gemv_acc(cache.o.data() + r * c, wo.value.data(), yr.data(), c, c);
        }
        return y;
    }

    BasicSparseVolume<T> backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy) {
        const auto cache = compute(x);
        const std::size_t n = x.size();
        const int c = channels, dh = channels / heads;
        const double scale = 1.0 / std::sqrt(double(dh));

        std::vector<T> go(n * c, T(0));
        for (std::size_t r = 0; r < n; ++r) {
            for (int k = 0; k < c; ++k)
                bo.grad[k] += gy.at(r, k);
            detail::gemv_back(cache.o.data() + r * c, wo.value.data(), gy.row(r).data(), go.data() + r * c, wo.grad.data(), c, c);
        }

        std::vector<T> gq(n * c, T(0)), gk(n * c, T(0)), gv(n * c, T(0));
        std::vector<double> gp(n);
        for (int h = 0; h < heads; ++h) {
            const T* P = cache.p.data() + std::size_t(h) * n * n;
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0;
                    for (int d = 0; d < dh; ++d)
                        s += double(go[i * c + h * dh + d]) * double(cache.v[j * c + h * dh + d]);
                    gp[j] = s;
                    dot += s * double(P[i * n + j]);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const double pij = double(P[i * n + j]);
                    const double gs = pij * (gp[j] - dot) * scale;
                    for (int d = 0; d < dh; ++d) {
                        gv[j * c + h * dh + d] += T(pij * double(go[i * c + h * dh + d]));
                        gq[i * c + h * dh + d] += T(gs * double(cache.k[j * c + h * dh + d]));
                        gk[j * c + h * dh + d] += T(gs * double(cache.q[i * c + h * dh + d]));
                    }
                }
            }
        }

        BasicSparseVolume<T> gx = gy;
        auto back_proj = [&](const std::vector<T>& g, Param<T>& w, Param<T>& b) {
            for (std::size_t r = 0; r < n; ++r) {
                for (int k = 0; k < c; ++k)
                    b.grad[k] += g[r * c + k];
                detail::gemv_back(x.row(r).data(), w.value.data(), g.data() + r * c, gx.row(r).data(), w.grad.data(), c, c);
            }
        };
        back_proj(gq, wq, bq);
        back_proj(gk, wk, bk);
        back_proj(gv, wv, bv);
        return gx;
    }

    void collect(ParamList<T>& out) {
        for (auto* p : {&wq, &wk, &wv, &wo, &bq, &bk, &bv, &bo})
            out.push_back(p);
    }
};

// ---- parameter-free helpers ----

/// Channel concatenation of volumes sharing one mask.
template <typename T>
BasicSparseVolume<T> concat_channels(const std::vector<const BasicSparseVolume<T>*>& parts) {
    DIDS_CHECK(!parts.empty(), "concat of zero volumes");
    int total = 0;
    for (const auto* p : parts) {
        DIDS_CHECK(p->mask().same_as(parts[0]->mask()), "concat requires identical masks");
        total += p->channels();
    }
    BasicSparseVolume<T> y(parts[0]->mask(), total);
    for (std::size_t r = 0; r < y.size(); ++r) {
        int off = 0;
        for (const auto* p : parts) {
            std::copy_n(p->row(r).begin(), p->channels(), y.row(r).begin() + off);
            off += p->channels();
        }
    }
    return y;
}

/// Columns [begin, begin + count) of `x`.
template <typename T>
BasicSparseVolume<T> slice_channels(const BasicSparseVolume<T>& x, int begin, int count) {
    DIDS_CHECK(begin >= 0 && count > 0 && begin + count <= x.channels(), "channel slice out of range");
    BasicSparseVolume<T> y(x.mask(), count);
    for (std::size_t r = 0; r < x.size(); ++r)
        std::copy_n(x.row(r).begin() + begin, count, y.row(r).begin());
    return y;
}

template <typename T>
BasicSparseVolume<T> ones_like_mask(const OccupancyMask& m) {
    BasicSparseVolume<T> y(m, 1);
    std::fill(y.data().begin(), y.data().end(), T(1));
    return y;
}

template <typename T>
BasicSparseVolume<T> add(const BasicSparseVolume<T>& a, const BasicSparseVolume<T>& b) {
    DIDS_CHECK(a.channels() == b.channels() && a.mask().same_as(b.mask()), "add requires identical layout");
    BasicSparseVolume<T> y = a;
    for (std::size_t i = 0; i < y.data().size(); ++i)
        y.data()[i] += b.data()[i];
    return y;
}

template <typename T>
BasicSparseVolume<T> scaled(const BasicSparseVolume<T>& a, double s) {
    BasicSparseVolume<T> y = a;
    for (auto& v : y.data())
        v = T(double(v) * s);
    return y;
}

/// Adds a per-channel vector to every active voxel.
template <typename T>
BasicSparseVolume<T> add_channel_bias(const BasicSparseVolume<T>& x, const std::vector<T>& b) {
    DIDS_CHECK(int(b.size()) == x.channels(), "broadcast vector length mismatch");
    BasicSparseVolume<T> y = x;
    for (std::size_t r = 0; r < y.size(); ++r)
        for (int c = 0; c < y.channels(); ++c)
            y.at(r, c) += b[c];
    return y;
}

template <typename T>
std::vector<T> channel_sum(const BasicSparseVolume<T>& g) {
    std::vector<T> s(g.channels(), T(0));
    for (std::size_t r = 0; r < g.size(); ++r)
        for (int c = 0; c < g.channels(); ++c)
            s[c] += g.at(r, c);
    return s;
}

/// Copies each parent's features to the target voxels inside it.
template <typename T>
BasicSparseVolume<T> upsample_nearest(const BasicSparseVolume<T>& x, const OccupancyMask& target, int factor) {
    DIDS_CHECK(target.extent() == x.extent().refined(factor), "nearest upsample extent mismatch");
    BasicSparseVolume<T> y(target, x.channels());
    const auto& coords = target.coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int p = x.mask().find(detail::parent_of(coords[r], factor));
        DIDS_CHECK(p >= 0, "nearest upsample target voxel has an inactive parent");
        std::copy_n(x.row(std::size_t(p)).begin(), x.channels(), y.row(r).begin());
    }
    return y;
}

template <typename T>
BasicSparseVolume<T> upsample_nearest_backward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>& gy, int factor) {
    BasicSparseVolume<T> gx = x.zeros_like();
    const auto& coords = gy.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int p = x.mask().find(detail::parent_of(coords[r], factor));
        for (int c = 0; c < x.channels(); ++c)
            gx.at(std::size_t(p), c) += gy.at(r, c);
    }
    return gx;
}

} // namespace dids
