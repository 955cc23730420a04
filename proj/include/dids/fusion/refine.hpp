// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Refinement of reconstructed scenes: TSDF diffusion on a given occupancy, optionally conditioned
// on a coarse TSDF. The condition has two channels, (tsdf value, 1) when a TSDF is given and
// (0, 0) in occupancy-only mode, so one model serves both modes.
//
#pragma once

#include <dids/fusion/crop_fusion.hpp>
#include <dids/geometry/marching_cubes.hpp>

namespace dids {

inline constexpr int kRefineConditionChannels = 2;

/// Condition volume on `mask`; `tsdf` (normalized units) must share the mask when present.
inline SparseVolume refine_condition(const OccupancyMask& mask, const SparseVolume* tsdf) {
    SparseVolume c(mask, kRefineConditionChannels);
    if (!tsdf)
        return c;
    if (!tsdf->mask().same_as(mask) || tsdf->channels() != 1)
        throw InputError("refinement condition does not match the occupancy mask");
    for (std::size_t r = 0; r < mask.size(); ++r) {
        c.at(r, 0) = tsdf->at(r, 0);
        c.at(r, 1) = 1.0f;
    }
    return c;
}

/// Training pair for the refinement model. With probability `drop` the condition is blanked,
/// which trains the occupancy-only mode.
inline DiffusionSample refine_training_sample(const SparseVolume& tsdf, const SparseVolume& coarse, double drop, Rng& rng) {
    const bool blank = rng.uniform() < drop;
    return {tsdf, refine_condition(tsdf.mask(), blank ? nullptr : &coarse)};
}

struct RefineOptions {
    GridExtent crop{96, 96, 96};
    int overlap = 32;
    FusionOptions fusion;
    SamplerOptions sampler{SamplerKind::Ddim, 200, ClipRange{}};
    double truncation = 0.12;
};

struct RefineResult {
    TsdfVolume tsdf;
    TriangleMesh mesh;
};

/// Samples a TSDF on `occupancy` with the refinement model and extracts its surface.
inline RefineResult refine_from_occupancy(const OccupancyMask& occupancy, const SparseVolume* tsdf_condition,
                                          const EpsPredictor& model, const NoiseSchedule& sched, const VoxelGrid& grid,
                                          const RefineOptions& opt, std::uint64_t seed) {
    if (occupancy.empty())
        throw InputError("refinement needs a non-empty occupancy");
    DIDS_CHECK(occupancy.extent() == grid.extent, "occupancy extent does not match the voxel grid");
    const SparseVolume cond = refine_condition(occupancy, tsdf_condition);
    const CropLayout layout = plan_crops(occupancy, opt.crop, opt.overlap);
    NoiseField noise;
    noise.rng = CounterRng{seed};
    noise.global = occupancy.extent();
    const SparseVolume x = fused_diffusion_loop(model, layout, 1, &cond, sched, opt.sampler, opt.fusion, noise);
    RefineResult out;
    out.tsdf = tsdf_from_sparse(x, grid, opt.truncation);
    out.mesh = marching_cubes(out.tsdf);
    return out;
}

} // namespace dids
