// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Bounding-volume hierarchy over a triangle mesh for nearest-point queries.
//
#pragma once

#include <dids/geometry/mesh.hpp>

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace dids {

/// Closest point on triangle (a, b, c) to p, by Voronoi-region classification.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = dot(ab, ap), d2 = dot(ac, ap);
    if (d1 <= 0 && d2 <= 0)
        return a;
    const Vec3 bp = p - b;
    const double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0 && d4 <= d3)
        return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0)
        return a + ab * (d1 / (d1 - d3));
    const Vec3 cp = p - c;
    const double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0 && d5 <= d6)
        return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0)
        return a + ac * (d2 / (d2 - d6));
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

struct ClosestHit {
    double distance = std::numeric_limits<double>::infinity();
    Vec3 point;
    int triangle = -1;
};

class Bvh {
public:
    explicit Bvh(const TriangleMesh& mesh) : mesh_(&mesh) {
        DIDS_CHECK(!mesh.empty(), "cannot build a BVH over an empty mesh");
        order_.resize(mesh.triangles.size());
        std::iota(order_.begin(), order_.end(), 0);
        centroids_.resize(order_.size());
        for (std::size_t t = 0; t < order_.size(); ++t)
            centroids_[t] = (mesh.corner(t, 0) + mesh.corner(t, 1) + mesh.corner(t, 2)) / 3.0;
        build(0, int(order_.size()));
    }

    /// Nearest surface point within `max_distance`; triangle == -1 when none is that close.
    ClosestHit closest(const Vec3& p, double max_distance = std::numeric_limits<double>::infinity()) const {
        ClosestHit hit;
        double best2 = max_distance * max_distance;
        std::vector<int> stack{0};
        while (!stack.empty()) {
            const Node& n = nodes_[std::size_t(stack.back())];
            stack.pop_back();
            if (box_distance2(n, p) >= best2)
                continue;
            if (n.count > 0) {
                for (int i = n.first; i < n.first + n.count; ++i) {
                    const std::size_t t = std::size_t(order_[std::size_t(i)]);
                    const Vec3 q = closest_point_on_triangle(p, mesh_->corner(t, 0), mesh_->corner(t, 1), mesh_->corner(t, 2));
                    const double d2 = dot(q - p, q - p);
                    if (d2 < best2) {
                        best2 = d2;
                        hit.point = q;
                        hit.triangle = int(t);
                    }
                }
                continue;
            }
            const double dl = box_distance2(nodes_[std::size_t(n.left)], p);
            const double dr = box_distance2(nodes_[std::size_t(n.right)], p);
            if (dl < dr) {
                stack.push_back(n.right);
                stack.push_back(n.left);
            } else {
                stack.push_back(n.left);
                stack.push_back(n.right);
            }
        }
        if (hit.triangle >= 0)
            hit.distance = std::sqrt(best2);
        return hit;
    }

    const TriangleMesh& mesh() const { return *mesh_; }

private:
    struct Node {
        Vec3 lo, hi;
        int left = -1, right = -1;
        int first = 0, count = 0;
    };

    static double box_distance2(const Node& n, const Vec3& p) {
        double s = 0;
        for (int a = 0; a < 3; ++a) {
            const double d = std::max({n.lo[a] - p[a], 0.0, p[a] - n.hi[a]});
            s += d * d;
        }
        return s;
    }

    int build(int first, int last) {
        const int id = int(nodes_.size());
        nodes_.emplace_back();
        Node n;
        n.lo = Vec3{1, 1, 1} * std::numeric_limits<double>::infinity();
        n.hi = -n.lo;
        for (int i = first; i < last; ++i)
            for (int c = 0; c < 3; ++c) {
                const Vec3 v = mesh_->corner(std::size_t(order_[std::size_t(i)]), c);
                n.lo = min3(n.lo, v);
                n.hi = max3(n.hi, v);
            }
        if (last - first <= kLeafSize) {
            n.first = first;
            n.count = last - first;
            nodes_[std::size_t(id)] = n;
            return id;
        }
        const Vec3 ext = n.hi - n.lo;
        const int axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
        const int mid = (first + last) / 2;
        std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + last,
                         [&](int a, int b) { return centroids_[std::size_t(a)][axis] < centroids_[std::size_t(b)][axis]; });
        n.left = build(first, mid);
        n.right = build(mid, last);
        nodes_[std::size_t(id)] = n;
        return id;
    }

    static constexpr int kLeafSize = 4;

    const TriangleMesh* mesh_;
    std::vector<int> order_;
    std::vector<Vec3> centroids_;
    std::vector<Node> nodes_;
};

} // namespace dids
