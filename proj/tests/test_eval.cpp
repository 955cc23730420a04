// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dids/eval/metrics.hpp>

#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

using namespace dids;

namespace {

TriangleMesh quad(double half, const Vec3& u, const Vec3& v, bool flip = false) {
    TriangleMesh m;
    m.vertices = {u * -half + v * -half, u * half + v * -half, u * half + v * half, u * -half + v * half};
    m.triangles = {{0, 1, 2}, {0, 2, 3}};
    if (flip)
        for (auto& t : m.triangles)
            std::swap(t[1], t[2]);
    return m;
}

// Rotation from a random unit quaternion.
Vec3 rotate(const Vec3& p, double qw, double qx, double qy, double qz) {
    const Vec3 q{qx, qy, qz};
    const Vec3 t = cross(q, p) * 2.0;
    return p + t * qw + cross(q, t);
}

} // namespace

TEST(TriangleMetrics, EquilateralAndDegenerateAnchors) {
    const auto eq = triangle_metrics({0, 0, 0}, {1, 0, 0}, {0.5, std::sqrt(3.0) / 2, 0});
    EXPECT_NEAR(eq.aspect_ratio, 1.0, 1e-12);
    EXPECT_NEAR(eq.circularity, 1.0, 1e-12);
    EXPECT_NEAR(eq.shape_regularity, 1.0, 1e-12);
    const auto line = triangle_metrics({0, 0, 0}, {1, 1, 1}, {2, 2, 2});
    EXPECT_EQ(line.aspect_ratio, 0.0);
    EXPECT_EQ(line.circularity, 0.0);
    EXPECT_EQ(line.shape_regularity, 0.0);
    const auto point = triangle_metrics({1, 2, 3}, {1, 2, 3}, {1, 2, 3});
    EXPECT_EQ(point.shape_regularity, 0.0);
}

TEST(TriangleMetrics, RightIsoscelesClosedForm) {
    const auto q = triangle_metrics({0, 0, 0}, {1, 0, 0}, {0, 1, 0});
    const double s2 = std::sqrt(2.0), s3 = std::sqrt(3.0);
    const double area = 0.5, perim = 2 + s2;
    const double r_in = area / (perim / 2), r_circ = s2 / 2;
    EXPECT_NEAR(q.aspect_ratio, 2 * r_in / r_circ, 1e-12);
    EXPECT_NEAR(q.aspect_ratio, 2 * s2 - 2, 1e-12);
    EXPECT_NEAR(q.circularity, 18.0 / (s3 * perim * perim), 1e-12);
    EXPECT_NEAR(q.shape_regularity, s3 / 2, 1e-12);
    EXPECT_NEAR(q.shape_regularity, 0.8660, 1e-4);
    EXPECT_NEAR(q.circularity, 0.8915, 1e-4);
    EXPECT_NEAR(q.aspect_ratio, 0.8284, 1e-4);
}

TEST(TriangleMetrics, SimilarityInvariant) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        Vec3 p[3];
        for (auto& x : p)
            x = {rng.normal(), rng.normal(), rng.normal()};
        double qw = rng.normal(), qx = rng.normal(), qy = rng.normal(), qz = rng.normal();
        const double qn = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
        qw /= qn, qx /= qn, qy /= qn, qz /= qn;
        const double s = std::exp(2 * rng.normal());
        const Vec3 shift{10 * rng.normal(), 10 * rng.normal(), 10 * rng.normal()};
        Vec3 q[3];
        for (int i = 0; i < 3; ++i)
            q[i] = rotate(p[i], qw, qx, qy, qz) * s + shift;
        const auto a = triangle_metrics(p[0], p[1], p[2]);
        const auto b = triangle_metrics(q[0], q[1], q[2]);
        EXPECT_NEAR(a.aspect_ratio, b.aspect_ratio, 1e-9);
        EXPECT_NEAR(a.circularity, b.circularity, 1e-9);
        EXPECT_NEAR(a.shape_regularity, b.shape_regularity, 1e-9);
        for (double m : {a.aspect_ratio, a.circularity, a.shape_regularity}) {
            EXPECT_GE(m, 0.0);
            EXPECT_LE(m, 1.0 + 1e-12);
        }
    }
}

TEST(TriangleMetrics, StretchingDegradesAllMetrics) {
    TriangleQuality prev{1, 1, 1};
    for (double f : {1.05, 1.2, 1.5, 2.0, 4.0, 10.0}) {
        const auto q = triangle_metrics({0, 0, 0}, {f, 0, 0}, {0.5 * f, std::sqrt(3.0) / 2, 0});
        EXPECT_LT(q.aspect_ratio, prev.aspect_ratio);
        EXPECT_LT(q.circularity, prev.circularity);
        EXPECT_LT(q.shape_regularity, prev.shape_regularity);
        prev = q;
    }
}

TEST(MeshQuality, EquilateralMeshAndTwoTriangleArithmetic) {
    // Regular tetrahedron: every face is equilateral.
    TriangleMesh tet;
    tet.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
    tet.triangles = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
    const auto q = mesh_quality_summary(tet);
    EXPECT_NEAR(q.mean.aspect_ratio, 1.0, 1e-12);
    EXPECT_NEAR(q.mean.circularity, 1.0, 1e-12);
    EXPECT_NEAR(q.mean.shape_regularity, 1.0, 1e-12);
    EXPECT_NEAR(q.variance.shape_regularity, 0.0, 1e-20);

    TriangleMesh two;
    two.vertices = {{0, 0, 0}, {1, 0, 0}, {0.5, std::sqrt(3.0) / 2, 0}, {0, 0, 1}, {1, 0, 1}, {0, 1, 1}};
    two.triangles = {{0, 1, 2}, {3, 4, 5}};
    const auto t = mesh_quality_summary(two);
    const double x = std::sqrt(3.0) / 2;
    EXPECT_NEAR(t.mean.shape_regularity, (1 + x) / 2, 1e-12);
    EXPECT_NEAR(t.variance.shape_regularity, std::pow((1 - x) / 2, 2), 1e-12);
    EXPECT_EQ(t.faces, 2u);
}

TEST(MeshQuality, PerturbationLowersEveryMean) {
    const auto ico = make_icosphere(1.0, 3);
    auto noisy = ico;
    Rng rng(9);
    for (auto& v : noisy.vertices)
        v = v + Vec3{rng.normal(), rng.normal(), rng.normal()} * 0.02;
    const auto a = mesh_quality_summary(ico), b = mesh_quality_summary(noisy);
    EXPECT_GT(a.mean.aspect_ratio, b.mean.aspect_ratio);
    EXPECT_GT(a.mean.circularity, b.mean.circularity);
    EXPECT_GT(a.mean.shape_regularity, b.mean.shape_regularity);
    EXPECT_THROW(mesh_quality_summary(TriangleMesh{}), InputError);
}

TEST(NormalError, IdenticalMeshesArePerfect) {
    const auto ico = make_icosphere(1.0, 2);
    const auto r = normal_error(ico, ico, 20000);
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
        EXPECT_DOUBLE_EQ(r.ratio[i], 100.0);
        EXPECT_LT(r.inlier_mean[i], 1e-4);
    }
}

TEST(NormalError, FlippedWindingIsOpposite) {
    const auto a = quad(1.0, {1, 0, 0}, {0, 1, 0});
    const auto b = quad(1.0, {1, 0, 0}, {0, 1, 0}, true);
    const auto r = normal_error(a, b, 5000);
    EXPECT_NEAR(r.mean_all, 180.0, 1e-6);
    EXPECT_EQ(r.ratio[0], 0.0);
}

TEST(NormalError, TiltedPlaneGivesTiltAngle) {
    const double tilt = 10.0 * std::numbers::pi / 180.0;
    const auto pred = quad(1.0, {1, 0, 0}, {0, 1, 0});
    const auto gt = quad(3.0, {1, 0, 0}, {0, std::cos(tilt), std::sin(tilt)});
    const auto r = normal_error(pred, gt, 20000);
    EXPECT_DOUBLE_EQ(r.ratio[1], 100.0);
    EXPECT_NEAR(r.inlier_mean[1], 10.0, 0.1);
    for (double e : r.errors)
        ASSERT_NEAR(e, 10.0, 1e-6);
}

TEST(NormalError, ThresholdsNest) {
    const auto ico = make_icosphere(1.0, 3);
    auto noisy = make_icosphere(1.0, 2);
    Rng rng(2);
    for (auto& v : noisy.vertices)
        v = v + Vec3{rng.normal(), rng.normal(), rng.normal()} * 0.1;
    const auto r = normal_error(noisy, ico, 20000);
    EXPECT_GE(r.ratio[0], r.ratio[1]);
    EXPECT_GE(r.ratio[1], r.ratio[2]);
    for (std::size_t i = 0; i < r.thresholds.size(); ++i)
        EXPECT_LE(r.inlier_mean[i], r.thresholds[i]);
    EXPECT_LT(r.ratio[2], 100.0);
    EXPECT_THROW(normal_error(TriangleMesh{}, ico), InputError);
}

TEST(Reports, KeyValueAndTextOutput) {
    const auto ico = make_icosphere(1.0, 1);
    const auto kv = to_key_values(mesh_quality_summary(ico));
    EXPECT_TRUE(kv.count("circularity.mean"));
    const auto nk = to_key_values(normal_error(ico, ico, 100));
    EXPECT_TRUE(nk.count("normal.lt45.ratio"));
    std::ostringstream os;
    write_key_values(os, nk);
    EXPECT_NE(os.str().find("normal.lt30.mean = "), std::string::npos);
    std::ostringstream text;
    print_quality(text, mesh_quality_summary(ico));
    EXPECT_NE(text.str().find("shape_regularity"), std::string::npos);
}
