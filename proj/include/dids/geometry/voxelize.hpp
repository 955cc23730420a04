// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Mesh to signed distance: exact unsigned distance from a BVH, sign from ray parity along the
// three grid axes. Rays pass through voxel centers; edge and vertex hits are resolved with a
// top-left fill rule so shared edges are counted exactly once.
//
#pragma once

#include <dids/geometry/bvh.hpp>
#include <dids/geometry/tsdf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dids {

namespace detail {

struct P2 {
    double x, y;
};

inline bool lex_less(const P2& a, const P2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); }

/// Orientation of q against the directed edge a->b, evaluated in a direction-independent way so
/// the two triangles sharing an edge get exactly opposite values.
inline double edge_fn(const P2& a, const P2& b, const P2& q) {
    if (lex_less(b, a))
        return -edge_fn(b, a, q);
    return (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
}

inline bool top_left(const P2& a, const P2& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    return dy > 0 || (dy == 0 && dx < 0);
}

} // namespace detail

/// Per-voxel parity along axis `a`: true where an odd number of surface crossings lie below the
/// voxel center on the ray through it.
inline std::vector<std::uint8_t> parity_along_axis(const TriangleMesh& mesh, const VoxelGrid& grid, int a) {
    using detail::P2;
    const int u = (a + 1) % 3, v = (a + 2) % 3;
    const int n[3] = {grid.extent.h, grid.extent.w, grid.extent.l};
    const double vs = grid.voxel_size;
    // hits[line] for line = iu * n[v] + iv
    std::vector<std::vector<double>> hits(std::size_t(n[u]) * std::size_t(n[v]));
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        Vec3 c3[3];
        P2 p[3];
        for (int c = 0; c < 3; ++c) {
            c3[c] = (mesh.corner(t, c) - grid.origin) / vs - Vec3{0.5, 0.5, 0.5};
            p[c] = {c3[c][u], c3[c][v]};
        }
        const double area = (p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[1].y - p[0].y) * (p[2].x - p[0].x);
        if (area == 0)
            continue;
        if (area < 0) {
            std::swap(p[1], p[2]);
            std::swap(c3[1], c3[2]);
        }
        const int ilo = std::max(0, int(std::ceil(std::min({p[0].x, p[1].x, p[2].x}))));
        const int ihi = std::min(n[u] - 1, int(std::floor(std::max({p[0].x, p[1].x, p[2].x}))));
        const int jlo = std::max(0, int(std::ceil(std::min({p[0].y, p[1].y, p[2].y}))));
        const int jhi = std::min(n[v] - 1, int(std::floor(std::max({p[0].y, p[1].y, p[2].y}))));
        for (int iu = ilo; iu <= ihi; ++iu)
            for (int iv = jlo; iv <= jhi; ++iv) {
                const P2 q{double(iu), double(iv)};
                double w[3];
                bool inside = true;
                for (int e = 0; e < 3 && inside; ++e) {
                    const P2& e0 = p[(e + 1) % 3];
                    const P2& e1 = p[(e + 2) % 3];
                    w[e] = detail::edge_fn(e0, e1, q);
                    inside = w[e] > 0 || (w[e] == 0 && detail::top_left(e0, e1));
                }
                if (!inside)
                    continue;
                const double s = w[0] + w[1] + w[2];
                const double x = (w[0] * c3[0][a] + w[1] * c3[1][a] + w[2] * c3[2][a]) / s;
                hits[std::size_t(iu) * std::size_t(n[v]) + std::size_t(iv)].push_back(x);
            }
    }
    std::vector<std::uint8_t> parity(std::size_t(grid.extent.volume()), 0);
    for (int iu = 0; iu < n[u]; ++iu)
        for (int iv = 0; iv < n[v]; ++iv) {
            auto& h = hits[std::size_t(iu) * std::size_t(n[v]) + std::size_t(iv)];
            std::sort(h.begin(), h.end());
            std::size_t below = 0;
            for (int ia = 0; ia < n[a]; ++ia) {
                while (below < h.size() && h[below] < double(ia))
                    ++below;
                int idx[3];
                idx[a] = ia;
                idx[u] = iu;
                idx[v] = iv;
                parity[std::size_t(grid.extent.linear({idx[0], idx[1], idx[2]}))] = std::uint8_t(below & 1u);
            }
        }
    return parity;
}

/// Signed distance (meters, negative inside) at every voxel center. Magnitudes beyond
/// `max_distance` are clamped to it. Throws InputError when the three parity rays disagree away
/// from the surface, which happens for meshes that are not closed.
inline BasicDenseVolume<double> voxelize_to_sdf(const TriangleMesh& mesh, const VoxelGrid& grid,
                                                double max_distance = std::numeric_limits<double>::infinity()) {
    DIDS_CHECK(!mesh.empty(), "cannot voxelize an empty mesh");
    DIDS_CHECK(grid.extent.valid() && grid.voxel_size > 0, "invalid voxel grid");
    mesh.validate();
    const Bvh bvh(mesh);
    const auto px = parity_along_axis(mesh, grid, 0);
    const auto py = parity_along_axis(mesh, grid, 1);
    const auto pz = parity_along_axis(mesh, grid, 2);
    const double on_surface = 1e-9 * grid.voxel_size;
    BasicDenseVolume<double> sdf(grid.extent, 1);
    std::size_t inconsistent = 0;
    for (std::int64_t idx = 0; idx < grid.extent.volume(); ++idx) {
        const auto c = grid.extent.coord(idx);
        const std::size_t s = std::size_t(idx);
        const int votes = px[s] + py[s] + pz[s];
        const auto hit = bvh.closest(grid.center(c), max_distance);
        const double d = hit.triangle >= 0 ? hit.distance : max_distance;
        if (votes != 0 && votes != 3 && d > on_surface)
            ++inconsistent;
        sdf.values[s] = votes >= 2 ? -d : d;
    }
    if (inconsistent > 0)
        throw InputError("inconsistent inside/outside parity at " + std::to_string(inconsistent) +
                         " voxels; the mesh is not watertight");
    return sdf;
}

} // namespace dids
