// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Procedural rooms for small-scale experiments. A room is a union of solid lattice cells (one
// cell per voxel): a floor slab, a full-height partition, a low wall, and box or round furniture.
// The surface is the boundary of the cell union, so it is closed by construction, and all faces
// lie on voxel boundaries, away from the voxel-center rays used for the sign.
//
#pragma once

#include <dids/geometry/voxelize.hpp>

#include <map>
#include <tuple>
#include <vector>

namespace dids {

class CellSolid {
public:
    explicit CellSolid(GridExtent e) : ext_(e), solid_(std::size_t(e.volume()), 0) {}

    const GridExtent& extent() const { return ext_; }
    bool at(int i, int j, int k) const {
        return ext_.contains({i, j, k}) && solid_[std::size_t(ext_.linear({i, j, k}))];
    }
    /// Fills [lo, hi) clipped to the grid.
    void box(VoxelCoord lo, VoxelCoord hi) {
        for (int i = std::max(lo.i, 0); i < std::min(hi.i, ext_.h); ++i)
            for (int j = std::max(lo.j, 0); j < std::min(hi.j, ext_.w); ++j)
                for (int k = std::max(lo.k, 0); k < std::min(hi.k, ext_.l); ++k)
                    solid_[std::size_t(ext_.linear({i, j, k}))] = 1;
    }
    /// Vertical column over the cells whose centers lie within `radius` of (ci, cj).
    void cylinder(double ci, double cj, double radius, int k0, int k1) {
        for (int i = 0; i < ext_.h; ++i)
            for (int j = 0; j < ext_.w; ++j) {
                const double di = i + 0.5 - ci, dj = j + 0.5 - cj;
                if (di * di + dj * dj <= radius * radius)
                    box({i, j, k0}, {i + 1, j + 1, k1});
            }
    }
    std::size_t count() const { return std::size_t(std::count(solid_.begin(), solid_.end(), 1)); }

    /// Boundary of the union as outward-facing triangles; coplanar faces are merged greedily
    /// into rectangles.
    TriangleMesh surface(const Vec3& origin, double cell) const {
        TriangleMesh m;
        std::map<std::tuple<int, int, int>, int> vid;
        auto vertex = [&](int x[3]) {
            const auto key = std::make_tuple(x[0], x[1], x[2]);
            auto it = vid.find(key);
            if (it != vid.end())
                return it->second;
            m.vertices.push_back(origin + Vec3{double(x[0]), double(x[1]), double(x[2])} * cell);
            const int id = int(m.vertices.size()) - 1;
            vid.emplace(key, id);
            return id;
        };
        const int n[3] = {ext_.h, ext_.w, ext_.l};
        for (int a = 0; a < 3; ++a) {
            const int u = (a + 1) % 3, v = (a + 2) % 3;
            std::vector<int> face(std::size_t(n[u]) * std::size_t(n[v]));
            for (int p = 0; p <= n[a]; ++p) {
                for (int iu = 0; iu < n[u]; ++iu)
                    for (int iv = 0; iv < n[v]; ++iv) {
                        int lo[3], hi[3];
                        lo[a] = p - 1;
                        hi[a] = p;
                        lo[u] = hi[u] = iu;
                        lo[v] = hi[v] = iv;
                        const bool s0 = at(lo[0], lo[1], lo[2]), s1 = at(hi[0], hi[1], hi[2]);
                        face[std::size_t(iu) * std::size_t(n[v]) + std::size_t(iv)] = s0 == s1 ? 0 : (s0 ? 1 : -1);
                    }
                for (int iu = 0; iu < n[u]; ++iu)
                    for (int iv = 0; iv < n[v]; ++iv) {
                        const int f = face[std::size_t(iu) * std::size_t(n[v]) + std::size_t(iv)];
                        if (f == 0)
                            continue;
                        auto same = [&](int x, int y) { return face[std::size_t(x) * std::size_t(n[v]) + std::size_t(y)] == f; };
                        int ev = iv + 1;
                        while (ev < n[v] && same(iu, ev))
                            ++ev;
                        int eu = iu + 1;
                        for (; eu < n[u]; ++eu) {
                            bool row = true;
                            for (int y = iv; y < ev && row; ++y)
                                row = same(eu, y);
                            if (!row)
                                break;
                        }
                        for (int x = iu; x < eu; ++x)
                            for (int y = iv; y < ev; ++y)
                                face[std::size_t(x) * std::size_t(n[v]) + std::size_t(y)] = 0;
                        int q[4];
                        const int uv[4][2] = {{iu, iv}, {eu, iv}, {eu, ev}, {iu, ev}};
                        for (int c = 0; c < 4; ++c) {
                            int x[3];
                            x[a] = p;
                            x[u] = uv[c][0];
                            x[v] = uv[c][1];
                            q[c] = vertex(x);
                        }
                        if (f > 0) {
                            m.triangles.push_back({q[0], q[1], q[2]});
                            m.triangles.push_back({q[0], q[2], q[3]});
                        } else {
                            m.triangles.push_back({q[0], q[2], q[1]});
                            m.triangles.push_back({q[0], q[3], q[2]});
                        }
                    }
            }
        }
        return m;
    }

private:
    GridExtent ext_;
    std::vector<std::uint8_t> solid_;
};

struct SyntheticRoom {
    TriangleMesh mesh;
    TsdfVolume tsdf;
};

struct RoomOptions {
    double voxel_size = 0.04;
    double truncation = 0.12;
    double max_occupancy = 0.19;
    int max_attempts = 32;
};

namespace detail {

inline int uniform_int(Rng& rng, int lo, int hi) { return lo + int(rng.below(std::uint64_t(std::max(hi - lo + 1, 1)))); }

inline CellSolid room_cells(const GridExtent& e, Rng& rng, int furniture) {
    CellSolid s(e);
    const int fh = uniform_int(rng, int(0.6 * e.h), int(0.8 * e.h));
    const int fw = uniform_int(rng, int(0.6 * e.w), int(0.8 * e.w));
    const int x0 = uniform_int(rng, 0, e.h - fh), y0 = uniform_int(rng, 0, e.w - fw);
    const int x1 = x0 + fh, y1 = y0 + fw;
    s.box({x0, y0, 0}, {x1, y1, 1});
    // Full-height partition on one footprint edge.
    const int plen = uniform_int(rng, std::max(e.h / 8, 2), std::max(e.h / 4, 3));
    if (rng.uniform() < 0.5) {
        const int px = uniform_int(rng, x0, x1 - plen), py = rng.uniform() < 0.5 ? y0 : y1 - 1;
        s.box({px, py, 1}, {px + plen, py + 1, e.l});
    } else {
        const int py = uniform_int(rng, y0, y1 - plen), px = rng.uniform() < 0.5 ? x0 : x1 - 1;
        s.box({px, py, 1}, {px + 1, py + plen, e.l});
    }
    // Low wall along another edge, with a door gap.
    const int wh = uniform_int(rng, std::max(e.l / 8, 2), std::max(e.l / 4, 3));
    const int gap = uniform_int(rng, 4, 8);
    if (rng.uniform() < 0.5) {
        const int wy = rng.uniform() < 0.5 ? y0 : y1 - 1;
        const int g0 = uniform_int(rng, x0 + 2, x1 - gap - 2);
        s.box({x0, wy, 1}, {g0, wy + 1, 1 + wh});
        s.box({g0 + gap, wy, 1}, {x1, wy + 1, 1 + wh});
    } else {
        const int wx = rng.uniform() < 0.5 ? x0 : x1 - 1;
        const int g0 = uniform_int(rng, y0 + 2, y1 - gap - 2);
        s.box({wx, y0, 1}, {wx + 1, g0, 1 + wh});
        s.box({wx, g0 + gap, 1}, {wx + 1, y1, 1 + wh});
    }
    for (int f = 0; f < furniture; ++f) {
        const int height = uniform_int(rng, 3, std::max(e.l / 4, 4));
        if (rng.uniform() < 0.6) {
            const int bx = uniform_int(rng, 3, std::max(fh / 5, 4)), by = uniform_int(rng, 3, std::max(fw / 5, 4));
            const int px = uniform_int(rng, x0 + 2, x1 - bx - 2), py = uniform_int(rng, y0 + 2, y1 - by - 2);
            s.box({px, py, 1}, {px + bx, py + by, 1 + height});
        } else {
            const double r = 1.5 + 2.5 * rng.uniform();
            const double cx = x0 + 2 + r + (fh - 4 - 2 * r) * rng.uniform();
            const double cy = y0 + 2 + r + (fw - 4 - 2 * r) * rng.uniform();
            s.cylinder(cx, cy, r, 1, 1 + height);
        }
    }
    return s;
}

} // namespace detail

/// `count` rooms on a grid of `extent` voxels. Each room is drawn from its own stream keyed by
/// (seed, index); draws whose occupancy reaches `max_occupancy` are redrawn with one item less.
inline std::vector<SyntheticRoom> synthetic_rooms(std::uint64_t seed, GridExtent extent, int count,
                                                  const RoomOptions& opt = {}) {
    DIDS_CHECK(extent.h >= 16 && extent.w >= 16 && extent.l >= 8, "room extent too small (min 16 x 16 x 8)");
    DIDS_CHECK(count >= 0, "room count must be non-negative");
    std::vector<SyntheticRoom> rooms;
    const VoxelGrid grid{{0, 0, 0}, opt.voxel_size, extent};
    for (int r = 0; r < count; ++r) {
        Rng rng(Rng::mix(seed ^ Rng::mix(std::uint64_t(r) + 1)));
        int furniture = 2 + int(rng.below(3));
        for (int attempt = 0;; ++attempt) {
            const auto cells = detail::room_cells(extent, rng, furniture);
            SyntheticRoom room;
            room.mesh = cells.surface(grid.origin, grid.voxel_size);
            room.tsdf = truncate_and_normalize(voxelize_to_sdf(room.mesh, grid, opt.truncation), grid, opt.truncation);
            if (room.tsdf.occupancy() < opt.max_occupancy || attempt + 1 >= opt.max_attempts) {
                rooms.push_back(std::move(room));
                break;
            }
            furniture = std::max(furniture - 1, 0);
        }
    }
    return rooms;
}

} // namespace dids
