// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/binary_io.hpp>
#include <dids/geometry/mesh.hpp>
#include <dids/sparse/volume.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace dids {

/// Axis-aligned voxel lattice in world space; voxel (i, j, k) is centered at
/// origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size. The third axis is vertical.
struct VoxelGrid {
    Vec3 origin;
    double voxel_size = 0.04;
    GridExtent extent;

    Vec3 center(const VoxelCoord& c) const {
        return origin + Vec3{c.i + 0.5, c.j + 0.5, c.k + 0.5} * voxel_size;
    }
    /// Continuous voxel-index coordinates of a world point (voxel centers at integers).
    Vec3 to_index(const Vec3& p) const { return (p - origin) / voxel_size - Vec3{0.5, 0.5, 0.5}; }
};

/// Truncated signed distance field. Active voxels are those with |sdf| < truncation; their values
/// are stored in voxel units, sdf / voxel_size, so the default truncation of three voxels maps to
/// [-3, 3]. Inactive voxels read as the positive truncation limit.
struct TsdfVolume {
    VoxelGrid grid;
    double truncation = 0.12;
    SparseVolume values; // one channel

    double limit() const { return truncation / grid.voxel_size; }
    const OccupancyMask& mask() const { return values.mask(); }
    double occupancy() const { return double(values.size()) / double(grid.extent.volume()); }

    /// Dense normalized values; inactive voxels take limit().
    DenseVolume dense() const { return to_dense(values, float(limit())); }

    /// Raw value in [-1, 1] (sdf / truncation).
    double raw(const VoxelCoord& c) const {
        const int r = values.mask().find(c);
        return r < 0 ? 1.0 : double(values.at(std::size_t(r), 0)) / limit();
    }
};

/// Builds a TsdfVolume from a dense signed distance (meters).
template <typename D>
TsdfVolume truncate_and_normalize(const BasicDenseVolume<D>& sdf, const VoxelGrid& grid, double truncation = 0.12) {
    DIDS_CHECK(sdf.extent == grid.extent && sdf.channels == 1, "SDF raster does not match the grid");
    DIDS_CHECK(truncation > 0 && grid.voxel_size > 0, "truncation and voxel size must be positive");
    std::vector<VoxelCoord> coords;
    std::vector<float> vals;
    for (std::int64_t idx = 0; idx < grid.extent.volume(); ++idx) {
        const double d = double(sdf.values[std::size_t(idx)]);
        if (std::abs(d) < truncation) {
            coords.push_back(grid.extent.coord(idx));
            vals.push_back(float(d / grid.voxel_size));
        }
    }
    return {grid, truncation, SparseVolume(OccupancyMask(grid.extent, std::move(coords)), 1, std::move(vals))};
}

/// Builds a TsdfVolume from dense normalized values; active iff |v| < truncation / voxel_size.
inline TsdfVolume tsdf_from_normalized(const DenseVolume& v, const VoxelGrid& grid, double truncation = 0.12) {
    DIDS_CHECK(v.extent == grid.extent && v.channels == 1, "TSDF raster does not match the grid");
    const double lim = truncation / grid.voxel_size;
    std::vector<VoxelCoord> coords;
    std::vector<float> vals;
    for (std::int64_t idx = 0; idx < grid.extent.volume(); ++idx) {
        const float x = v.values[std::size_t(idx)];
        if (!std::isfinite(x))
            throw InputError("non-finite TSDF value");
        if (std::abs(double(x)) < lim) {
            coords.push_back(grid.extent.coord(idx));
            vals.push_back(x);
        }
    }
    return {grid, truncation, SparseVolume(OccupancyMask(grid.extent, std::move(coords)), 1, std::move(vals))};
}

/// TSDF on an explicit mask; values are clamped to the truncation limit.
inline TsdfVolume tsdf_from_sparse(const SparseVolume& v, const VoxelGrid& grid, double truncation = 0.12) {
    DIDS_CHECK(v.extent() == grid.extent && v.channels() == 1, "sparse TSDF does not match the grid");
    const float lim = float(truncation / grid.voxel_size);
    SparseVolume c = v;
    for (float& x : c.data())
        x = std::clamp(x, -lim, lim);
    return {grid, truncation, std::move(c)};
}

// TSDF1 layout (little-endian):
//   "TSDF1" | int32 H, W, L | float64 voxel_size, truncation | float64 origin x, y, z |
//   H*W*L float32 normalized values in row-major (i, j, k) order; inactive voxels hold the limit

inline void write_tsdf(std::ostream& os, const TsdfVolume& t) {
    io::put_magic(os, "TSDF1");
    io::put<std::int32_t>(os, t.grid.extent.h);
    io::put<std::int32_t>(os, t.grid.extent.w);
    io::put<std::int32_t>(os, t.grid.extent.l);
    io::put<double>(os, t.grid.voxel_size);
    io::put<double>(os, t.truncation);
    for (int a = 0; a < 3; ++a)
        io::put<double>(os, t.grid.origin[a]);
    for (float v : t.dense().values)
        io::put<float>(os, v);
}

inline TsdfVolume read_tsdf(std::istream& is) {
    io::expect_magic(is, "TSDF1");
    VoxelGrid g;
    g.extent.h = io::get<std::int32_t>(is);
    g.extent.w = io::get<std::int32_t>(is);
    g.extent.l = io::get<std::int32_t>(is);
    g.voxel_size = io::get<double>(is);
    const double trunc = io::get<double>(is);
    for (int a = 0; a < 3; ++a)
        g.origin[a] = io::get<double>(is);
    if (!g.extent.valid() || !(g.voxel_size > 0) || !(trunc > 0))
        throw InputError("corrupt TSDF1 header");
    DenseVolume d(g.extent, 1);
    for (float& v : d.values)
        v = io::get<float>(is);
    return tsdf_from_normalized(d, g, trunc);
}

inline void save_tsdf(const std::string& path, const TsdfVolume& t) {
    auto os = io::open_out(path);
    write_tsdf(os, t);
    if (!os)
        throw InputError("write failed: " + path);
}

inline TsdfVolume load_tsdf(const std::string& path) {
    auto is = io::open_in(path);
    return read_tsdf(is);
}

} // namespace dids
