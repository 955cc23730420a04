// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Training loops for the autoencoder, the three stage denoisers and the refinement model. Every
// stage trains on its own; the stage denoisers only need a frozen autoencoder to produce latents.
//
#pragma once

#include <dids/cascade/pipeline.hpp>
#include <dids/diffusion/trainer.hpp>
#include <dids/geometry/crop.hpp>

#include <filesystem>
#include <functional>

namespace dids {

/// Loads every *.tsdf file of a directory in name order.
inline std::vector<TsdfVolume> load_tsdf_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw InputError("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".tsdf")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw InputError("no .tsdf files in " + dir);
    std::vector<TsdfVolume> out;
    for (const auto& f : files)
        out.push_back(load_tsdf(f));
    return out;
}

/// Ground-truth latents of a scene: quantized encoder outputs on the pooled masks.
struct SceneLatents {
    SparseVolume x;
    LatentVolume z1, z2;
};

inline SceneLatents encode_scene(const OccupancyAutoencoder<float>& vq, const SparseVolume& x) {
    const auto enc = vq.encoder().forward(x);
    auto q1 = vq.quantize_level(enc.z1);
    auto q2 = vq.quantize_level(enc.z2);
    return {x, {1, std::move(q1.zq), std::move(q1.indices)}, {2, std::move(q2.zq), std::move(q2.indices)}};
}

/// Diffusion training pair of stage 1, 2 or 3.
inline DiffusionSample stage_training_sample(int stage, const SceneLatents& s) {
    switch (stage) {
    case 1:
        return {s.z1.volume, std::nullopt};
    case 2:
        return {s.z2.volume, stage2_condition(s.z1, s.z2.mask())};
    case 3:
        return {s.x, stage3_condition(s.z1, s.z2, s.x.mask())};
    default:
        throw InputError("stage must be 1, 2 or 3");
    }
}

/// Draws a training crop. Scenes no larger than the crop are used whole unless rotation is on.
inline SparseVolume draw_crop(const TsdfVolume& scene, const TrainConfig& tc, Rng& rng) {
    const GridExtent e = scene.grid.extent;
    if (!tc.rotate && e == tc.crop)
        return scene.values;
    return random_crop(scene, {tc.crop, tc.rotate}, rng).values;
}

using TrainLog = std::function<void(long step, double loss)>;

/// Autoencoder steps [from, to). Returns the last report.
inline VqLossReport train_vq(OccupancyAutoencoder<float>& model, Adam<float>& opt, Adam<float>& opt_disc,
                             const std::vector<TsdfVolume>& data, const TrainConfig& tc, Rng& rng, long from, long to,
                             const std::function<void(long, const VqLossReport&)>& log = {}) {
    DIDS_CHECK(!data.empty(), "training set is empty");
    VqLossReport last;
    for (long step = from; step < to; ++step) {
        const auto& scene = data[std::size_t(rng.below(data.size()))];
        const auto x = draw_crop(scene, tc, rng);
        if (x.empty())
            continue;
        last = model.train_step(x, step, opt, opt_disc, rng);
        if (log && (step + 1) % std::max(tc.log_every, 1) == 0)
            log(step + 1, last);
    }
    return last;
}

/// Stage denoiser steps [from, to) on freshly drawn crops, with latents from the frozen `vq`.
/// Returns the mean loss of the last logging window.
inline double train_stage(int stage, Denoiser<float>& model, Adam<float>& opt, const OccupancyAutoencoder<float>& vq,
                          const std::vector<TsdfVolume>& data, const TrainConfig& tc, const NoiseSchedule& sched, Rng& rng,
                          long from, long to, const TrainLog& log = {}) {
    DIDS_CHECK(!data.empty(), "training set is empty");
    double window = 0, last = 0;
    long n = 0;
    for (long step = from; step < to; ++step) {
        std::vector<DiffusionSample> batch;
        while (int(batch.size()) < tc.batch) {
            const auto x = draw_crop(data[std::size_t(rng.below(data.size()))], tc, rng);
            if (!x.empty())
                batch.push_back(stage_training_sample(stage, encode_scene(vq, x)));
        }
        window += train_step(batch, model, sched, opt, rng);
        ++n;
        if ((step + 1) % std::max(tc.log_every, 1) == 0 || step + 1 == to) {
            last = window / double(n);
            if (log)
                log(step + 1, last);
            window = 0;
            n = 0;
        }
    }
    return last;
}

/// Coarse TSDF for refinement training: the ground truth plus independent Gaussian error per voxel.
inline SparseVolume degrade_tsdf(const SparseVolume& x, double sigma, double limit, Rng& rng) {
    SparseVolume c = x;
    for (auto& v : c.data())
        v = float(std::clamp(double(v) + sigma * rng.normal(), -limit, limit));
    return c;
}

inline double train_refine(Denoiser<float>& model, Adam<float>& opt, const std::vector<TsdfVolume>& data,
                           const TrainConfig& tc, const NoiseSchedule& sched, double limit, Rng& rng, long from, long to,
                           const TrainLog& log = {}) {
    DIDS_CHECK(!data.empty(), "training set is empty");
    double window = 0, last = 0;
    long n = 0;
    for (long step = from; step < to; ++step) {
        std::vector<DiffusionSample> batch;
        while (int(batch.size()) < tc.batch) {
            const auto x = draw_crop(data[std::size_t(rng.below(data.size()))], tc, rng);
            if (!x.empty())
                batch.push_back(refine_training_sample(x, degrade_tsdf(x, tc.coarse_noise, limit, rng), tc.condition_dropout, rng));
        }
        window += train_step(batch, model, sched, opt, rng);
        ++n;
        if ((step + 1) % std::max(tc.log_every, 1) == 0 || step + 1 == to) {
            last = window / double(n);
            if (log)
                log(step + 1, last);
            window = 0;
            n = 0;
        }
    }
    return last;
}

} // namespace dids
