// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Mesh quality and normal-error metrics.
//
// Triangle quality (each is 1 for an equilateral triangle, 0 for a degenerate one):
//   aspect_ratio     = 2 r / R                   (inradius over circumradius)
//   circularity      = 36 A / (sqrt(3) P^2)      (area over squared perimeter)
//   shape_regularity = 4 sqrt(3) A / sum(e_i^2)
//
#pragma once

#include <dids/geometry/bvh.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

namespace dids {

struct TriangleQuality {
    double aspect_ratio = 0;
    double circularity = 0;
    double shape_regularity = 0;
};

inline TriangleQuality triangle_metrics(const Vec3& a, const Vec3& b, const Vec3& c) {
    const double e1 = norm(b - a), e2 = norm(c - b), e3 = norm(a - c);
    const double area = 0.5 * norm(cross(b - a, c - a));
    const double sq = e1 * e1 + e2 * e2 + e3 * e3;
    if (!(area > 1e-14 * sq) || !std::isfinite(area))
        return {};
    const double perim = e1 + e2 + e3;
    const double r_in = 2.0 * area / perim;
    const double r_circ = e1 * e2 * e3 / (4.0 * area);
    const double s3 = std::sqrt(3.0);
    return {2.0 * r_in / r_circ, 36.0 * area / (s3 * perim * perim), 4.0 * s3 * area / sq};
}

struct MeshQuality {
    std::size_t faces = 0;
    TriangleQuality mean;
    TriangleQuality variance; // population variance
};

/// Unweighted mean and population variance over faces; degenerate faces count as zeros.
inline MeshQuality mesh_quality_summary(const TriangleMesh& mesh) {
    if (mesh.empty())
        throw InputError("mesh quality of an empty mesh is undefined");
    MeshQuality q;
    q.faces = mesh.triangles.size();
    std::vector<TriangleQuality> per(q.faces);
    for (std::size_t t = 0; t < q.faces; ++t) {
        per[t] = triangle_metrics(mesh.corner(t, 0), mesh.corner(t, 1), mesh.corner(t, 2));
        q.mean.aspect_ratio += per[t].aspect_ratio;
        q.mean.circularity += per[t].circularity;
        q.mean.shape_regularity += per[t].shape_regularity;
    }
    const double n = double(q.faces);
    q.mean = {q.mean.aspect_ratio / n, q.mean.circularity / n, q.mean.shape_regularity / n};
    for (const auto& p : per) {
        q.variance.aspect_ratio += std::pow(p.aspect_ratio - q.mean.aspect_ratio, 2);
        q.variance.circularity += std::pow(p.circularity - q.mean.circularity, 2);
        q.variance.shape_regularity += std::pow(p.shape_regularity - q.mean.shape_regularity, 2);
    }
    q.variance = {q.variance.aspect_ratio / n, q.variance.circularity / n, q.variance.shape_regularity / n};
    return q;
}

struct NormalErrorReport {
    std::size_t samples = 0;
    double mean_all = 0; // degrees, over every sample
    std::vector<double> thresholds; // degrees
    std::vector<double> ratio;      // percent of samples with error < threshold
    std::vector<double> inlier_mean; // degrees, over those samples
    std::vector<double> errors;     // per sample, degrees
};

/// Samples `samples` points uniformly by area on `pred`, finds the nearest point on `gt`, and
/// compares the two face normals.
inline NormalErrorReport normal_error(const TriangleMesh& pred, const TriangleMesh& gt, std::size_t samples = 100000,
                                      std::vector<double> thresholds = {90.0, 45.0, 30.0}, std::uint64_t seed = 0) {
    if (pred.empty() || gt.empty())
        throw InputError("normal error needs two non-empty meshes");
    DIDS_CHECK(samples > 0, "sample count must be positive");
    std::vector<double> cdf(pred.triangles.size());
    double total = 0;
    for (std::size_t t = 0; t < cdf.size(); ++t)
        cdf[t] = (total += pred.area(t));
    if (!(total > 0))
        throw InputError("predicted mesh has zero area");
    std::vector<Vec3> gt_normal(gt.triangles.size());
    for (std::size_t t = 0; t < gt_normal.size(); ++t)
        gt_normal[t] = normalized(gt.face_cross(t));
    const Bvh bvh(gt);
    Rng rng(seed);
    NormalErrorReport r;
    r.samples = samples;
    r.errors.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) {
        const double pick = rng.uniform() * total;
        const std::size_t t = std::min<std::size_t>(std::size_t(std::upper_bound(cdf.begin(), cdf.end(), pick) - cdf.begin()),
                                                    cdf.size() - 1);
        double u = rng.uniform(), v = rng.uniform();
        if (u + v > 1) {
            u = 1 - u;
            v = 1 - v;
        }
        const Vec3 a = pred.corner(t, 0);
        const Vec3 p = a + (pred.corner(t, 1) - a) * u + (pred.corner(t, 2) - a) * v;
        const auto hit = bvh.closest(p);
        const Vec3 np = normalized(pred.face_cross(t));
        const double cosang = std::clamp(dot(np, gt_normal[std::size_t(hit.triangle)]), -1.0, 1.0);
        r.errors.push_back(std::acos(cosang) * 180.0 / std::numbers::pi);
    }
    for (double e : r.errors)
        r.mean_all += e;
    r.mean_all /= double(samples);
    r.thresholds = std::move(thresholds);
    for (double th : r.thresholds) {
        std::size_t in = 0;
        double sum = 0;
        for (double e : r.errors)
            if (e < th) {
                ++in;
                sum += e;
            }
        r.ratio.push_back(100.0 * double(in) / double(samples));
        r.inlier_mean.push_back(in > 0 ? sum / double(in) : 0.0);
    }
    return r;
}

// ---- reports ----

using KeyValues = std::map<std::string, double>;

inline KeyValues to_key_values(const MeshQuality& q) {
    return {{"faces", double(q.faces)},
            {"aspect_ratio.mean", q.mean.aspect_ratio},
            {"aspect_ratio.variance", q.variance.aspect_ratio},
            {"circularity.mean", q.mean.circularity},
            {"circularity.variance", q.variance.circularity},
            {"shape_regularity.mean", q.mean.shape_regularity},
            {"shape_regularity.variance", q.variance.shape_regularity}};
}

inline KeyValues to_key_values(const NormalErrorReport& r) {
    KeyValues kv{{"normal.samples", double(r.samples)}, {"normal.mean", r.mean_all}};
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
        char key[64];
        std::snprintf(key, sizeof(key), "normal.lt%g", r.thresholds[i]);
        kv[std::string(key) + ".ratio"] = r.ratio[i];
        kv[std::string(key) + ".mean"] = r.inlier_mean[i];
    }
    return kv;
}

inline void write_key_values(std::ostream& os, const KeyValues& kv) {
    char buf[64];
    for (const auto& [k, v] : kv) {
        std::snprintf(buf, sizeof(buf), "%.9g", v);
        os << k << " = " << buf << '\n';
    }
}

inline void print_quality(std::ostream& os, const MeshQuality& q) {
    char buf[160];
    os << "metric            mean      variance (population)\n";
    const std::pair<const char*, std::pair<double, double>> rows[] = {
        {"aspect_ratio", {q.mean.aspect_ratio, q.variance.aspect_ratio}},
        {"circularity", {q.mean.circularity, q.variance.circularity}},
        {"shape_regularity", {q.mean.shape_regularity, q.variance.shape_regularity}}};
    for (const auto& [name, mv] : rows) {
        std::snprintf(buf, sizeof(buf), "%-17s %.4f    %.5f\n", name, mv.first, mv.second);
        os << buf;
    }
    os << "faces " << q.faces << '\n';
}

inline void print_normals(std::ostream& os, const NormalErrorReport& r) {
    char buf[160];
    os << "threshold  ratio(%)  mean(deg)\n";
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "<%-8g  %7.2f   %7.3f\n", r.thresholds[i], r.ratio[i], r.inlier_mean[i]);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "samples %zu, mean over all %.3f deg\n", r.samples, r.mean_all);
    os << buf;
}

} // namespace dids
