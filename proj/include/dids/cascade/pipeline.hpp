// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Three-stage generation: coarse latents z1 on a user mask, finer latents z2 on the mask decoded
// from z1, then the TSDF on the mask decoded from (z1, z2). Sampled latents are snapped to the
// codebook before they are decoded or used as conditions.
//
#pragma once

#include <dids/cascade/checkpoint.hpp>
#include <dids/cascade/config.hpp>
#include <dids/fusion/refine.hpp>

#include <memory>

namespace dids {

inline void add_schedule_meta(Checkpoint& c, const ScheduleSpec& s) {
    c.meta["schedule"] = s.kind;
    c.meta["timesteps"] = std::to_string(s.steps);
    c.meta["beta_start"] = std::to_string(s.beta_start);
    c.meta["beta_end"] = std::to_string(s.beta_end);
}

/// A denoiser trained under one noise schedule cannot be sampled under another. Checkpoints
/// without schedule metadata are accepted as they are.
inline void check_schedule_meta(const Checkpoint& c, const ScheduleSpec& s, const std::string& path) {
    if (!c.meta.count("schedule"))
        return;
    Checkpoint want;
    add_schedule_meta(want, s);
    for (const auto& [k, v] : want.meta)
        if (c.get(k) != v)
            throw InputError(path + ": trained with " + k + " = " + c.get(k) + ", config has " + v);
}

/// Models used by the samplers. `denoisers` owns the networks behind `eps` when they were loaded
/// from checkpoints; tests may install closed-form predictors instead.
struct CascadeModels {
    std::shared_ptr<const OccupancyAutoencoder<float>> vq;
    std::array<EpsPredictor, 3> eps;
    std::array<std::shared_ptr<const Denoiser<float>>, 3> denoisers;
    std::array<std::string, 4> hashes; // checkpoint file hashes: vq, stage1..3
};

inline CascadeModels load_cascade_models(const std::string& vq_path, const std::array<std::string, 3>& stage_paths,
                                         const CascadeConfig& cfg) {
    CascadeModels m;
    m.vq = std::make_shared<const OccupancyAutoencoder<float>>(vq_from_checkpoint(load_checkpoint(vq_path), cfg.vq));
    m.hashes[0] = io::file_hash(vq_path);
    for (std::size_t s = 0; s < 3; ++s) {
        const auto ck = load_checkpoint(stage_paths[s]);
        if (ck.kind != "stage" + std::to_string(s + 1))
            throw InputError(stage_paths[s] + " is a " + ck.kind + " checkpoint, expected stage" + std::to_string(s + 1));
        check_schedule_meta(ck, cfg.stage[s].schedule, stage_paths[s]);
        auto d = std::make_shared<const Denoiser<float>>(denoiser_from_checkpoint(ck));
        const auto& spec = d->spec();
        const auto& want = cfg.stage[s].denoiser;
        if (spec.in_channels != want.in_channels || spec.cond_channels != want.cond_channels)
            throw InputError(stage_paths[s] + " does not match the configured latent size");
        m.eps[s] = d->predictor();
        m.denoisers[s] = std::move(d);
        m.hashes[s + 1] = io::file_hash(stage_paths[s]);
    }
    return m;
}

struct StageArtifacts {
    OccupancyMask mask_z1, mask_z2, mask_x;
    LatentVolume z1, z2;
    SparseVolume tsdf; // normalized units on mask_x
};

struct GeneratedScene {
    StageArtifacts stages;
    TsdfVolume tsdf;
    TriangleMesh mesh;
};

namespace detail {

inline LatentVolume finish_latent(const CascadeModels& m, const CascadeConfig& cfg, SparseVolume z, int level) {
    if (cfg.snap_latents)
        return m.vq->snap(z, level);
    return {level, std::move(z), {}};
}

/// Aborts when a decoded mask keeps fewer than min_occupancy of its candidate voxels.
inline void check_layout(const OccupancyMask& decoded, std::size_t candidates, const CascadeConfig& cfg, const char* stage) {
    const double rate = candidates ? double(decoded.size()) / double(candidates) : 0.0;
    if (decoded.empty() || rate < cfg.min_occupancy)
        throw DegenerateLayout(std::string("degenerate layout: ") + stage + " mask keeps " + std::to_string(decoded.size()) +
                               " of " + std::to_string(candidates) + " voxels");
}

} // namespace detail

inline LatentVolume stage1_sample(const CascadeModels& m, const CascadeConfig& cfg, const OccupancyMask& mask_z1, Rng& rng) {
    if (mask_z1.empty())
        throw InputError("stage 1 needs a non-empty mask");
    const auto& st = cfg.stage[0];
    auto z = sample(m.eps[0], mask_z1, cfg.vq.latent_dim, nullptr, st.schedule.make(), st.sampler, rng);
    return detail::finish_latent(m, cfg, std::move(z), 1);
}

/// M_z2 = threshold(G1(z1)).
inline OccupancyMask decode_mask_z2(const CascadeModels& m, const CascadeConfig& cfg, const LatentVolume& z1) {
    return threshold_mask(m.vq->decode_mask_level1(z1.volume), cfg.mask_threshold);
}

/// M_x = threshold(G2(z1, z2)).
inline OccupancyMask decode_mask_x(const CascadeModels& m, const CascadeConfig& cfg, const LatentVolume& z1,
                                   const LatentVolume& z2) {
    return threshold_mask(m.vq->decode_mask_level2(z1.volume, z2.volume).logits, cfg.mask_threshold);
}

inline SparseVolume stage2_condition(const LatentVolume& z1, const OccupancyMask& mask_z2) {
    return upsample_nearest(z1.volume, mask_z2, 2);
}

inline SparseVolume stage3_condition(const LatentVolume& z1, const LatentVolume& z2, const OccupancyMask& mask_x) {
    const auto c1 = upsample_nearest(z1.volume, mask_x, VqSpec::kStride1);
    const auto c2 = upsample_nearest(z2.volume, mask_x, VqSpec::kStride2);
    return concat_channels<float>({&c1, &c2});
}

inline LatentVolume stage2_sample(const CascadeModels& m, const CascadeConfig& cfg, const LatentVolume& z1, Rng& rng) {
    const auto mask = decode_mask_z2(m, cfg, z1);
    detail::check_layout(mask, z1.mask().size() * 8, cfg, "stage 2");
    const auto cond = stage2_condition(z1, mask);
    const auto& st = cfg.stage[1];
    auto z = sample(m.eps[1], mask, cfg.vq.latent_dim, &cond, st.schedule.make(), st.sampler, rng);
    return detail::finish_latent(m, cfg, std::move(z), 2);
}

/// TSDF on M_x. Scenes larger than one crop go through the fused crop loop; otherwise this is a
/// direct sample, and both paths draw the same noise for a given rng state.
inline SparseVolume stage3_sample(const CascadeModels& m, const CascadeConfig& cfg, const LatentVolume& z1,
                                  const LatentVolume& z2, Rng& rng) {
    const auto mask = decode_mask_x(m, cfg, z1, z2);
    detail::check_layout(mask, z2.mask().size() * 64, cfg, "stage 3");
    const auto cond = stage3_condition(z1, z2, mask);
    const auto& st = cfg.stage[2];
    const GridExtent e = mask.extent();
    if (e.h <= cfg.crop.h && e.w <= cfg.crop.w && e.l <= cfg.crop.l)
        return sample(m.eps[2], mask, 1, &cond, st.schedule.make(), st.sampler, rng);
    NoiseField noise;
    noise.rng = CounterRng{rng.next()};
    noise.global = e;
    const auto layout = plan_crops(mask, cfg.crop, cfg.overlap);
    return fused_diffusion_loop(m.eps[2], layout, 1, &cond, st.schedule.make(), st.sampler, {cfg.fusion, cfg.threads}, noise);
}

/// Checks that `extent` is generatable under `cfg`.
inline void check_scene_extent(const GridExtent& extent, const CascadeConfig& cfg) {
    if (!extent.valid() || extent.h > cfg.cap.h || extent.w > cfg.cap.w || extent.l > cfg.cap.l)
        throw InputError("scene extent must be positive and within the configured cap");
    if (!extent.divisible_by(VqSpec::kStride1))
        throw InputError("scene extent must be divisible by 8");
    const auto z1 = extent.coarsened(VqSpec::kStride1);
    const auto z2 = extent.coarsened(VqSpec::kStride2);
    if (!z1.divisible_by(1 << cfg.stage[0].denoiser.levels) || !z2.divisible_by(1 << cfg.stage[1].denoiser.levels))
        throw InputError("latent extents are not divisible by the stage 1/2 denoiser strides");
    const GridExtent crop{std::min(cfg.crop.h, extent.h), std::min(cfg.crop.w, extent.w), std::min(cfg.crop.l, extent.l)};
    if (!crop.divisible_by(1 << cfg.stage[2].denoiser.levels))
        throw InputError("stage 3 crop extent is not divisible by the denoiser stride");
}

/// Stages 1 to 3 and surface extraction. `mask_z1` defaults to the full latent grid.
inline GeneratedScene generate_scene(const CascadeModels& m, const CascadeConfig& cfg, const GridExtent& extent,
                                     std::uint64_t seed, const OccupancyMask* mask_z1 = nullptr) {
    check_scene_extent(extent, cfg);
    const auto full = OccupancyMask::full(extent.coarsened(VqSpec::kStride1));
    const OccupancyMask& m1 = mask_z1 ? *mask_z1 : full;
    DIDS_CHECK(m1.extent() == full.extent(), "stage 1 mask extent must be the scene extent / 8");
    GeneratedScene out;
    auto& a = out.stages;
    Rng r1(Rng::mix(seed ^ 1)), r2(Rng::mix(seed ^ 2)), r3(Rng::mix(seed ^ 3));
    a.z1 = stage1_sample(m, cfg, m1, r1);
    a.mask_z1 = a.z1.mask();
    a.z2 = stage2_sample(m, cfg, a.z1, r2);
    a.mask_z2 = a.z2.mask();
    a.tsdf = stage3_sample(m, cfg, a.z1, a.z2, r3);
    a.mask_x = a.tsdf.mask();
    out.tsdf = tsdf_from_sparse(a.tsdf, VoxelGrid{{0, 0, 0}, cfg.voxel_size, extent}, cfg.truncation);
    out.mesh = marching_cubes(out.tsdf);
    return out;
}

// ---- manifests ----

using Manifest = std::map<std::string, std::string>;

inline void save_manifest(const std::string& path, const Manifest& m) {
    auto os = io::open_out(path);
    for (const auto& [k, v] : m)
        os << k << " = " << v << '\n';
    if (!os)
        throw InputError("failed writing manifest: " + path);
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw InputError("cannot open manifest: " + path);
    return ConfigFile::parse(is, path).values();
}

} // namespace dids
