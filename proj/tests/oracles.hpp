// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations. Written against plain dense arrays so they share no code
// path with the sparse kernels they check.
//
#pragma once

#include <dids/sparse/ops.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace dids::oracle {

/// Random volume on a random (or full) mask.
template <typename T>
BasicSparseVolume<T> random_volume(Rng& rng, GridExtent e, int channels, double density = 1.0) {
    std::vector<VoxelCoord> c;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
            for (int k = 0; k < e.l; ++k)
                if (density >= 1.0 || rng.uniform() < density)
                    c.push_back({i, j, k});
    BasicSparseVolume<T> v(OccupancyMask(e, std::move(c)), channels);
    for (auto& x : v.data())
        x = T(rng.normal());
    return v;
}

/// Zero-padded dense 3D convolution (correlation) evaluated at every grid voxel.
inline std::vector<double> dense_conv3d(const std::vector<double>& x, GridExtent e, int cin, const std::vector<double>& w,
                                        const std::vector<double>& b, int cout, int ksize) {
    std::vector<double> y(std::size_t(e.volume()) * cout);
    const int r = ksize / 2;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
            for (int k = 0; k < e.l; ++k) {
                double* out = &y[std::size_t(e.linear({i, j, k})) * cout];
                for (int co = 0; co < cout; ++co)
                    out[co] = b[co];
                int tap = 0;
                for (int a = -r; a <= r; ++a)
                    for (int bb = -r; bb <= r; ++bb)
                        for (int d = -r; d <= r; ++d, ++tap) {
                            const VoxelCoord n{i + a, j + bb, k + d};
                            if (!e.contains(n))
                                continue;
                            const double* in = &x[std::size_t(e.linear(n)) * cin];
                            for (int ci = 0; ci < cin; ++ci)
                                for (int co = 0; co < cout; ++co)
                                    out[co] += in[ci] * w[(std::size_t(tap) * cin + ci) * cout + co];
                        }
            }
    return y;
}

/// Dense transposed convolution with stride = kernel = f.
inline std::vector<double> dense_conv_transpose(const std::vector<double>& x, GridExtent e, int cin,
                                                const std::vector<double>& w, const std::vector<double>& b, int cout,
                                                int f) {
    const GridExtent eo = e.refined(f);
    std::vector<double> y(std::size_t(eo.volume()) * cout);
    for (int i = 0; i < eo.h; ++i)
        for (int j = 0; j < eo.w; ++j)
            for (int k = 0; k < eo.l; ++k) {
                const int tap = ((i % f) * f + (j % f)) * f + (k % f);
                const double* in = &x[std::size_t(e.linear({i / f, j / f, k / f})) * cin];
                double* out = &y[std::size_t(eo.linear({i, j, k})) * cout];
                for (int co = 0; co < cout; ++co) {
                    out[co] = b[co];
                    for (int ci = 0; ci < cin; ++ci)
                        out[co] += in[ci] * w[(std::size_t(tap) * cin + ci) * cout + co];
                }
            }
    return y;
}

/// Group norm over rows of an [n, C] array.
inline std::vector<double> dense_group_norm(const std::vector<double>& x, std::size_t n, int channels, int groups,
                                            const std::vector<double>& gamma, const std::vector<double>& beta,
                                            double eps) {
    std::vector<double> y(x.size());
    const int gs = channels / groups;
    for (int g = 0; g < groups; ++g) {
        double mean = 0, var = 0;
        for (std::size_t r = 0; r < n; ++r)
            for (int c = g * gs; c < (g + 1) * gs; ++c)
                mean += x[r * channels + c];
        mean /= double(n * gs);
        for (std::size_t r = 0; r < n; ++r)
            for (int c = g * gs; c < (g + 1) * gs; ++c)
                var += (x[r * channels + c] - mean) * (x[r * channels + c] - mean);
        var /= double(n * gs);
        for (std::size_t r = 0; r < n; ++r)
            for (int c = g * gs; c < (g + 1) * gs; ++c)
                y[r * channels + c] = (x[r * channels + c] - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
    }
    return y;
}

/// Brute-force residual multi-head attention on an [n, C] array.
inline std::vector<double> brute_attention(const std::vector<double>& x, std::size_t n, int c, int heads,
                                           const std::vector<std::vector<double>>& w, // wq wk wv wo
                                           const std::vector<std::vector<double>>& b) {
    auto proj = [&](const std::vector<double>& in, int which) {
        std::vector<double> out(n * c);
        for (std::size_t r = 0; r < n; ++r)
            for (int o = 0; o < c; ++o) {
                double s = b[which][o];
                for (int i = 0; i < c; ++i)
                    s += in[r * c + i] * w[which][std::size_t(i) * c + o];
                out[r * c + o] = s;
            }
        return out;
    };
    const auto q = proj(x, 0), k = proj(x, 1), v = proj(x, 2);
    const int dh = c / heads;
    std::vector<double> att(n * c, 0.0);
    for (int h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n);
            for (std::size_t j = 0; j < n; ++j) {
                double d = 0;
                for (int t = 0; t < dh; ++t)
                    d += q[i * c + h * dh + t] * k[j * c + h * dh + t];
                s[j] = d / std::sqrt(double(dh));
            }
            double z = 0;
            for (auto& sv : s)
                z += std::exp(sv);
            for (std::size_t j = 0; j < n; ++j)
                for (int t = 0; t < dh; ++t)
                    att[i * c + h * dh + t] += std::exp(s[j]) / z * v[j * c + h * dh + t];
        }
    auto out = proj(att, 3);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += x[i];
    return out;
}

/// Normalized TSDF of a sphere (voxel units), active where |sdf| < 3.
inline SparseVolume sphere_tsdf(GridExtent e, double ci, double cj, double ck, double radius) {
    std::vector<VoxelCoord> c;
    std::vector<float> v;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
            for (int k = 0; k < e.l; ++k) {
                const double d = std::sqrt((i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck)) - radius;
                if (std::abs(d) < 3.0) {
                    c.push_back({i, j, k});
                    v.push_back(float(d));
                }
            }
    return SparseVolume(OccupancyMask(e, std::move(c)), 1, std::move(v));
}

template <typename T>
std::vector<double> as_double(const std::vector<T>& v) {
    return {v.begin(), v.end()};
}

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t checked = 0;
};

/// Central finite differences of `loss` with respect to `values[idx]`, compared to `analytic`.
/// The relative error of each entry uses max(|a|, |n|, floor) as denominator.
inline GradCheckResult check_gradient(std::vector<double>& values, const std::vector<double>& analytic,
                                      const std::function<double()>& loss, double step = 1e-4,
                                      std::size_t max_entries = 64, double floor = 1e-6) {
    GradCheckResult res;
    const std::size_t stride = std::max<std::size_t>(1, values.size() / max_entries);
    for (std::size_t i = 0; i < values.size(); i += stride) {
        const double orig = values[i];
        values[i] = orig + step;
        const double lp = loss();
        values[i] = orig - step;
        const double lm = loss();
        values[i] = orig;
        const double num = (lp - lm) / (2 * step);
        const double den = std::max({std::abs(num), std::abs(analytic[i]), floor});
        res.max_rel_error = std::max(res.max_rel_error, std::abs(num - analytic[i]) / den);
        ++res.checked;
    }
    return res;
}

/// sum(r * y) for a fixed random projection r.
template <typename T>
double project_loss(const BasicSparseVolume<T>& y, const std::vector<double>& r) {
    double s = 0;
    for (std::size_t i = 0; i < y.data().size(); ++i)
        s += double(y.data()[i]) * r[i];
    return s;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v)
        x = rng.normal();
    return v;
}

template <typename T>
BasicSparseVolume<T> volume_from(const BasicSparseVolume<T>& like, const std::vector<double>& v) {
    BasicSparseVolume<T> y = like.zeros_like();
    for (std::size_t i = 0; i < v.size(); ++i)
        y.data()[i] = T(v[i]);
    return y;
}

} // namespace dids::oracle
