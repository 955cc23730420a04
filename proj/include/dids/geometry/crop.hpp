// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/geometry/tsdf.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <tuple>
#include <utility>

namespace dids {

struct CropAugmentation {
    GridExtent size{96, 96, 96};
    bool rotate = true;
};

/// The transform chosen by random_crop: the scene is rotated by `angle` about the vertical axis
/// through its horizontal center, then the block starting at `origin` (rotated-frame voxel
/// indices) is cut out.
struct CropDraw {
    double angle = 0.0;
    VoxelCoord origin;
    bool fallback = false;
};

namespace detail {

inline Vec3 scene_pivot(const GridExtent& e) { return {0.5 * (e.h - 1), 0.5 * (e.w - 1), 0.0}; }

inline double snap_fraction(double x) {
    const double r = std::round(x);
    return std::abs(x - r) < 1e-9 ? r : x;
}

} // namespace detail

/// Integer voxel range (inclusive) inside the bounding box of the active voxel centers after
/// rotation by `angle`.
inline std::pair<Vec3, Vec3> rotated_active_bounds(const TsdfVolume& t, double angle) {
    const Vec3 c = detail::scene_pivot(t.grid.extent);
    const double cs = std::cos(angle), sn = std::sin(angle);
    Vec3 lo = Vec3{1, 1, 1} * std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& v : t.mask().coords()) {
        const double x = v.i - c.x, y = v.j - c.y;
        const Vec3 r{detail::snap_fraction(c.x + cs * x - sn * y), detail::snap_fraction(c.y + sn * x + cs * y), double(v.k)};
        lo = min3(lo, r);
        hi = max3(hi, r);
    }
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::ceil(lo[a]);
        hi[a] = std::floor(hi[a]);
    }
    return {lo, hi};
}

/// Resamples a rotated block. Values are bilinear in the horizontal plane (the vertical axis is
/// never interpolated); a voxel is active only if every source voxel with non-zero weight is.
inline TsdfVolume crop_with(const TsdfVolume& t, const GridExtent& size, double angle, const VoxelCoord& origin) {
    DIDS_CHECK(size.valid(), "crop size must be positive");
    const auto& src = t.mask();
    const Vec3 c = detail::scene_pivot(t.grid.extent);
    const double cs = std::cos(angle), sn = std::sin(angle);
    std::vector<VoxelCoord> coords;
    std::vector<float> vals;
    for (int i = 0; i < size.h; ++i)
        for (int j = 0; j < size.w; ++j) {
            const double x = origin.i + i - c.x, y = origin.j + j - c.y;
            const double si = detail::snap_fraction(c.x + cs * x + sn * y);
            const double sj = detail::snap_fraction(c.y - sn * x + cs * y);
            const int i0 = int(std::floor(si)), j0 = int(std::floor(sj));
            const double fi = si - i0, fj = sj - j0;
            for (int k = 0; k < size.l; ++k) {
                const int sk = origin.k + k;
                double acc = 0;
                bool active = true;
                for (int di = 0; di < 2 && active; ++di)
                    for (int dj = 0; dj < 2 && active; ++dj) {
                        const double w = (di ? fi : 1 - fi) * (dj ? fj : 1 - fj);
                        if (w == 0)
                            continue;
                        const int r = src.find({i0 + di, j0 + dj, sk});
                        if (r < 0)
                            active = false;
                        else
                            acc += w * double(t.values.at(std::size_t(r), 0));
                    }
                if (active) {
                    coords.push_back({i, j, k});
                    vals.push_back(float(acc));
                }
            }
        }
    VoxelGrid g{t.grid.origin + Vec3{double(origin.i), double(origin.j), double(origin.k)} * t.grid.voxel_size,
                t.grid.voxel_size, size};
    return {g, t.truncation, SparseVolume(OccupancyMask(size, std::move(coords)), 1, std::move(vals))};
}

/// Random rotation about the vertical axis and a translation that keeps the whole crop inside the
/// bounding box of the rotated active region. Falls back to an unrotated crop centered on the
/// active region when the region cannot hold the crop.
inline TsdfVolume random_crop(const TsdfVolume& t, const CropAugmentation& aug, Rng& rng, CropDraw* draw = nullptr) {
    DIDS_CHECK(!t.mask().empty(), "cannot crop a scene without active voxels");
    CropDraw d;
    d.angle = aug.rotate ? rng.uniform() * 2.0 * std::numbers::pi : 0.0;
    const int size[3] = {aug.size.h, aug.size.w, aug.size.l};
    auto [lo, hi] = rotated_active_bounds(t, d.angle);
    bool fits = true;
    for (int a = 0; a < 3; ++a)
        fits = fits && hi[a] - lo[a] + 1 >= size[a];
    int o[3];
    if (fits) {
        for (int a = 0; a < 3; ++a)
            o[a] = int(lo[a]) + int(rng.below(std::uint64_t(hi[a] - lo[a] + 2 - size[a])));
    } else {
        d.fallback = true;
        d.angle = 0.0;
        std::tie(lo, hi) = rotated_active_bounds(t, 0.0);
        const int n[3] = {t.grid.extent.h, t.grid.extent.w, t.grid.extent.l};
        for (int a = 0; a < 3; ++a) {
            const int centered = int(std::floor(0.5 * (lo[a] + hi[a] + 1 - size[a])));
            o[a] = n[a] >= size[a] ? std::clamp(centered, 0, n[a] - size[a]) : centered;
        }
    }
    d.origin = {o[0], o[1], o[2]};
    if (draw)
        *draw = d;
    return crop_with(t, aug.size, d.angle, d.origin);
}

} // namespace dids
