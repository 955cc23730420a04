// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Marching cubes on a sparse TSDF. The case table is derived at startup: on each cube face the
// sign-change points are joined into segments (ambiguous faces keep the inside corners
// separated), and segments are chained across faces into closed polygons. Because the face rule
// depends only on the face's corners, neighbouring cubes agree and the output has no cracks.
//
#pragma once

#include <dids/geometry/tsdf.hpp>

#include <array>
#include <unordered_map>
#include <vector>

namespace dids {

namespace detail {

struct McTables {
    std::array<std::array<int, 2>, 12> edge_corners{};
    // Per configuration (bit c set = corner c inside), triangles as triples of edge ids.
    std::array<std::vector<std::array<int, 3>>, 256> triangles;

    McTables() {
        int edge_id[8][8];
        int e = 0;
        for (int c = 0; c < 8; ++c)
            for (int a = 0; a < 3; ++a)
                if (!(c & (1 << a))) {
                    const int d = c | (1 << a);
                    edge_corners[std::size_t(e)] = {c, d};
                    edge_id[c][d] = edge_id[d][c] = e++;
                }
        // Faces as corner cycles, counter-clockwise seen from outside the cube.
        std::vector<std::array<int, 4>> faces;
        for (int a = 0; a < 3; ++a) {
            const int u = (a + 1) % 3, v = (a + 2) % 3;
            for (int s = 0; s < 2; ++s) {
                std::array<int, 4> f{};
                const int uv[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
                for (int i = 0; i < 4; ++i)
                    f[std::size_t(i)] = (s << a) | (uv[i][0] << u) | (uv[i][1] << v);
                if (s == 0)
                    std::swap(f[1], f[3]);
                faces.push_back(f);
            }
        }
        for (int cfg = 0; cfg < 256; ++cfg) {
            auto inside = [&](int c) { return (cfg >> c) & 1; };
            std::array<int, 12> next;
            next.fill(-1);
            for (const auto& f : faces) {
                bool cross[4];
                for (int i = 0; i < 4; ++i)
                    cross[i] = inside(f[std::size_t(i)]) != inside(f[std::size_t((i + 1) % 4)]);
                for (int i = 0; i < 4; ++i) {
                    if (!cross[i] || !inside(f[std::size_t(i)]))
                        continue; // not an exit
                    int j = (i + 3) % 4;
                    while (!cross[j])
                        j = (j + 3) % 4;
                    const int exit_edge = edge_id[f[std::size_t(i)]][f[std::size_t((i + 1) % 4)]];
                    const int entry_edge = edge_id[f[std::size_t(j)]][f[std::size_t((j + 1) % 4)]];
                    next[std::size_t(exit_edge)] = entry_edge;
                }
            }
            std::array<bool, 12> seen{};
            for (int start = 0; start < 12; ++start) {
                if (next[std::size_t(start)] < 0 || seen[std::size_t(start)])
                    continue;
                std::vector<int> poly;
                for (int x = start; !seen[std::size_t(x)]; x = next[std::size_t(x)]) {
                    seen[std::size_t(x)] = true;
                    poly.push_back(x);
                }
                // Chains run clockwise around the outward normal; emit reversed.
                for (std::size_t k = 1; k + 1 < poly.size(); ++k)
                    triangles[std::size_t(cfg)].push_back({poly[0], poly[k + 1], poly[k]});
            }
        }
    }
};

inline const McTables& mc_tables() {
    static const McTables t;
    return t;
}

} // namespace detail

/// Iso-surface of `values` over cubes whose eight corners are all in `mask`. Triangles face the
/// positive side. Vertex normals are area-weighted face normals.
inline TriangleMesh marching_cubes(const DenseVolume& values, const OccupancyMask& mask, const VoxelGrid& grid,
                                   double iso = 0.0) {
    DIDS_CHECK(values.extent == grid.extent && mask.extent() == grid.extent && values.channels == 1,
               "marching cubes inputs do not share a grid");
    const auto& tab = detail::mc_tables();
    const GridExtent ext = grid.extent;
    TriangleMesh mesh;
    std::unordered_map<std::int64_t, int> vertex_of;
    const std::int64_t nvox = ext.volume();

    auto vertex = [&](const VoxelCoord& base, int edge) {
        const auto [ca, cb] = tab.edge_corners[std::size_t(edge)];
        const VoxelCoord pa = base + VoxelCoord{ca & 1, (ca >> 1) & 1, (ca >> 2) & 1};
        const VoxelCoord pb = base + VoxelCoord{cb & 1, (cb >> 1) & 1, (cb >> 2) & 1};
        const double va = values.at(pa, 0), vb = values.at(pb, 0);
        const double t = (iso - va) / (vb - va);
        std::int64_t key;
        if (t <= 0)
            key = ext.linear(pa);
        else if (t >= 1)
            key = ext.linear(pb);
        else
            key = nvox + 3 * ext.linear(pa) + (ca ^ cb) / 2; // axis bit 1, 2, 4 -> 0, 1, 2
        auto it = vertex_of.find(key);
        if (it != vertex_of.end())
            return it->second;
        const double tc = std::clamp(t, 0.0, 1.0);
        const Vec3 p = grid.center(pa) * (1 - tc) + grid.center(pb) * tc;
        mesh.vertices.push_back(p);
        const int id = int(mesh.vertices.size()) - 1;
        vertex_of.emplace(key, id);
        return id;
    };

    for (const auto& c : mask.coords()) {
        if (c.i + 1 >= ext.h || c.j + 1 >= ext.w || c.k + 1 >= ext.l)
            continue;
        int cfg = 0;
        bool complete = true;
        for (int corner = 0; corner < 8 && complete; ++corner) {
            const VoxelCoord p = c + VoxelCoord{corner & 1, (corner >> 1) & 1, (corner >> 2) & 1};
            if (mask.find(p) < 0)
                complete = false;
            else if (values.at(p, 0) < iso)
                cfg |= 1 << corner;
        }
        if (!complete || cfg == 0 || cfg == 255)
            continue;
        for (const auto& tri : tab.triangles[std::size_t(cfg)]) {
            const Triangle t{vertex(c, tri[0]), vertex(c, tri[1]), vertex(c, tri[2])};
            if (t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
                mesh.triangles.push_back(t);
        }
    }
    mesh.normals.assign(mesh.vertices.size(), Vec3{});
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        const Vec3 n = mesh.face_cross(t);
        for (int v : mesh.triangles[t])
            mesh.normals[std::size_t(v)] = mesh.normals[std::size_t(v)] + n;
    }
    for (auto& n : mesh.normals)
        n = normalized(n);
    return mesh;
}

inline TriangleMesh marching_cubes(const TsdfVolume& tsdf, double iso = 0.0) {
    return marching_cubes(tsdf.dense(), tsdf.mask(), tsdf.grid, iso);
}

} // namespace dids
