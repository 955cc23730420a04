// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Forward noising, reverse steps, the masked noise-prediction loss and the noise-level embedding.
//
#pragma once

#include <dids/diffusion/schedule.hpp>
#include <dids/sparse/ops.hpp>

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

namespace dids {

/// A diffused volume, its mask (the volume's coordinate set) and an optional condition y.
struct DiffusionSample {
    SparseVolume volume;
    std::optional<SparseVolume> condition;

    const OccupancyMask& mask() const { return volume.mask(); }
};

/// Gaussian noise keyed by global voxel position, so that overlapping crops of one scene draw
/// identical values at shared voxels.
struct NoiseField {
    CounterRng rng;
    VoxelCoord origin{};            // crop origin inside the global grid
    GridExtent global{1 << 20, 1 << 20, 1 << 20};

    double normal(const VoxelCoord& local, std::uint64_t stream, int channel) const {
        const VoxelCoord g = local + origin;
        return rng.normal(std::uint64_t(global.linear(g)), stream, std::uint64_t(channel));
    }

    SparseVolume volume(const OccupancyMask& mask, int channels, std::uint64_t stream) const {
        SparseVolume v(mask, channels);
        const auto& coords = mask.coords();
        for (std::size_t r = 0; r < coords.size(); ++r)
            for (int c = 0; c < channels; ++c)
                v.at(r, c) = float(normal(coords[r], stream, c));
        return v;
    }
};

/// Closed-form forward marginal sqrt(ab) x0 + sqrt(1 - ab) eps.
template <typename T>
BasicSparseVolume<T> q_sample(const BasicSparseVolume<T>& x0, int t, const BasicSparseVolume<T>& noise,
                              const NoiseSchedule& sched) {
    DIDS_CHECK(t >= 0 && t <= sched.steps(), "timestep out of range");
    DIDS_CHECK(noise.mask().same_as(x0.mask()) && noise.channels() == x0.channels(), "noise must share the sample mask");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    BasicSparseVolume<T> out = x0.zeros_like();
    for (std::size_t i = 0; i < out.data().size(); ++i)
        out.data()[i] = T(a * double(x0.data()[i]) + b * double(noise.data()[i]));
    return out;
}

/// Posterior mean of the reverse step from t to t_prev given predicted noise. For consecutive
/// steps (t_prev = t - 1) the effective alpha equals alpha_t.
inline SparseVolume ddpm_mean(const SparseVolume& xt, int t, int t_prev, const SparseVolume& eps, const NoiseSchedule& sched) {
    const double ab = sched.alpha_bar(t);
    const double alpha = ab / sched.alpha_bar(t_prev);
    const double beta = 1.0 - alpha;
    const double k = beta / std::sqrt(1.0 - ab);
    SparseVolume mu = xt.zeros_like();
    for (std::size_t i = 0; i < mu.data().size(); ++i)
        mu.data()[i] = float((double(xt.data()[i]) - k * double(eps.data()[i])) / std::sqrt(alpha));
    return mu;
}

/// Ancestral step x_{t_prev} = mu + sigma z with fixed variance sigma^2 = beta (z ignored when t_prev = 0).
inline SparseVolume ddpm_step_between(const SparseVolume& xt, int t, int t_prev, const SparseVolume& eps,
                                      const NoiseSchedule& sched, const SparseVolume* z) {
    DIDS_CHECK(t >= 1, "reverse step needs t >= 1");
    DIDS_CHECK(t_prev >= 0 && t_prev < t, "reverse step needs t_prev < t");
    DIDS_CHECK(eps.mask().same_as(xt.mask()), "predicted noise must share the sample mask");
    SparseVolume out = ddpm_mean(xt, t, t_prev, eps, sched);
    if (t_prev > 0 && z != nullptr) {
        const double sigma = std::sqrt(1.0 - sched.alpha_bar(t) / sched.alpha_bar(t_prev));
        for (std::size_t i = 0; i < out.data().size(); ++i)
            out.data()[i] += float(sigma * double(z->data()[i]));
    }
    return out;
}

inline SparseVolume ddpm_reverse_step(const SparseVolume& xt, int t, const SparseVolume& eps, const NoiseSchedule& sched,
                                      const SparseVolume* z) {
    return ddpm_step_between(xt, t, t - 1, eps, sched, z);
}

struct ClipRange {
    double lo = -3.0;
    double hi = 3.0;
};

/// Deterministic (eta = 0) DDIM update from t to t_prev.
inline SparseVolume ddim_step(const SparseVolume& xt, int t, int t_prev, const SparseVolume& eps, const NoiseSchedule& sched,
                              std::optional<ClipRange> clip = std::nullopt) {
    DIDS_CHECK(t_prev <= t, "DDIM step requires t_prev <= t");
    DIDS_CHECK(eps.mask().same_as(xt.mask()), "predicted noise must share the sample mask");
    if (t_prev == t)
        return xt;
    const double ab = sched.alpha_bar(t), ap = sched.alpha_bar(t_prev);
    SparseVolume out = xt.zeros_like();
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        const double e = double(eps.data()[i]);
        double x0 = (double(xt.data()[i]) - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
        if (clip)
            x0 = std::clamp(x0, clip->lo, clip->hi);
        out.data()[i] = float(std::sqrt(ap) * x0 + std::sqrt(1.0 - ap) * e);
    }
    return out;
}

/// Mean squared error over active voxels and channels, with its gradient w.r.t. `pred`.
template <typename T>
struct MaskedLoss {
    double value = 0;
    BasicSparseVolume<T> grad;
};

template <typename T>
MaskedLoss<T> masked_mse_loss(const BasicSparseVolume<T>& target, const BasicSparseVolume<T>& pred) {
    DIDS_CHECK(target.mask().same_as(pred.mask()) && target.channels() == pred.channels(), "loss operands must share a mask");
    DIDS_CHECK(!target.empty(), "masked loss over an empty mask");
    const double n = double(target.data().size());
    MaskedLoss<T> res{0.0, pred.zeros_like()};
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        const double d = double(pred.data()[i]) - double(target.data()[i]);
        res.value += d * d;
        res.grad.data()[i] = T(2.0 * d / n);
    }
    res.value /= n;
    return res;
}

/// Sinusoidal embedding of the noise level u = scale * sqrt(alpha_bar):
/// [sin(u f_0), ..., sin(u f_{h-1}), cos(u f_0), ..., cos(u f_{h-1})], f_i = 10000^(-i/h), h = dim/2.
inline std::vector<double> alpha_embedding(double alpha_bar, int dim, double scale = 1000.0) {
    DIDS_CHECK(dim >= 2 && dim % 2 == 0, "embedding dimension must be even and >= 2");
    DIDS_CHECK(alpha_bar > 0.0 && alpha_bar <= 1.0, "alpha_bar must lie in (0, 1]");
    const int half = dim / 2;
    const double u = scale * std::sqrt(alpha_bar);
    std::vector<double> e(dim);
    for (int i = 0; i < half; ++i) {
        const double f = std::pow(10000.0, -double(i) / double(half));
        e[i] = std::sin(u * f);
        e[half + i] = std::cos(u * f);
    }
    return e;
}

/// Noise predictor: (x_t, condition or null, alpha_bar_t) -> predicted eps on x_t's mask.
using EpsPredictor = std::function<SparseVolume(const SparseVolume&, const SparseVolume*, double)>;

enum class SamplerKind { Ddim, Ddpm };

struct SamplerOptions {
    SamplerKind kind = SamplerKind::Ddim;
    int steps = 200;
    std::optional<ClipRange> clip;
};

/// One reverse transition for either sampler; `z` is only read by DDPM.
inline SparseVolume reverse_transition(const SparseVolume& xt, int t, int t_prev, const SparseVolume& eps,
                                       const NoiseSchedule& sched, const SamplerOptions& opt, const SparseVolume* z) {
    if (opt.kind == SamplerKind::Ddim)
        return ddim_step(xt, t, t_prev, eps, sched, opt.clip);
    SparseVolume out = ddpm_step_between(xt, t, t_prev, eps, sched, z);
    if (opt.clip && t_prev == 0)
        for (auto& v : out.data())
            v = float(std::clamp(double(v), opt.clip->lo, opt.clip->hi));
    return out;
}

/// Reverse diffusion on a fixed mask, starting from standard normal noise.
inline SparseVolume sample(const EpsPredictor& model, const OccupancyMask& mask, int channels, const SparseVolume* condition,
                           const NoiseSchedule& sched, const SamplerOptions& opt, const NoiseField& noise) {
    DIDS_CHECK(!mask.empty(), "sampling requires a non-empty mask");
    if (condition)
        DIDS_CHECK(condition->mask().same_as(mask), "condition must share the sample mask");
    SparseVolume x = noise.volume(mask, channels, 0);
    const auto plan = strided_timesteps(sched, opt.steps);
    for (const auto& [t, t_prev] : plan) {
        const SparseVolume eps = model(x, condition, sched.alpha_bar(t));
        if (opt.kind == SamplerKind::Ddpm) {
            const SparseVolume z = noise.volume(mask, channels, std::uint64_t(t) + 1);
            x = reverse_transition(x, t, t_prev, eps, sched, opt, &z);
        } else {
            x = reverse_transition(x, t, t_prev, eps, sched, opt, nullptr);
        }
        if (!x.all_finite())
            throw NumericalError("non-finite value during sampling");
    }
    return x;
}

inline SparseVolume sample(const EpsPredictor& model, const OccupancyMask& mask, int channels, const SparseVolume* condition,
                           const NoiseSchedule& sched, const SamplerOptions& opt, Rng& rng) {
    NoiseField field;
    field.rng = CounterRng{rng.next()};
    field.global = mask.extent();
    return sample(model, mask, channels, condition, sched, opt, field);
}

} // namespace dids
