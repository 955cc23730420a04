// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dids/diffusion/denoiser.hpp>
#include <dids/fusion/refine.hpp>

#include "stats.hpp"
#include "toy_models.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace dids;

namespace {

OccupancyMask random_mask(Rng& rng, GridExtent e, double density) {
    std::vector<VoxelCoord> c;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
            for (int k = 0; k < e.l; ++k)
                if (rng.uniform() < density)
                    c.push_back({i, j, k});
    return OccupancyMask(e, std::move(c));
}

SparseVolume random_values(const OccupancyMask& m, int ch, Rng& rng) {
    SparseVolume v(m, ch);
    for (auto& x : v.data())
        x = float(rng.normal());
    return v;
}

// Layout of k crops that all cover one voxel, plus that voxel's row.
CropLayout stacked_layout(int k) {
    OccupancyMask m(GridExtent{k + 1, 1, 1}, {{k, 0, 0}});
    std::vector<CropBox> boxes;
    for (int i = 0; i < k; ++i)
        boxes.push_back({{i + 1, 0, 0}, {k - i, 1, 1}});
    return bind_layout(m, boxes);
}

} // namespace

TEST(PlanCrops, TileOriginsStrideArithmetic) {
    EXPECT_EQ(tile_origins(160, 96, 32), (std::vector<int>{0, 64}));
    EXPECT_EQ(tile_origins(96, 96, 32), (std::vector<int>{0}));
    EXPECT_EQ(tile_origins(50, 96, 32), (std::vector<int>{0}));
    EXPECT_EQ(tile_origins(200, 96, 32), (std::vector<int>{0, 64, 104}));
    EXPECT_EQ(tile_origins(10, 4, 1), (std::vector<int>{0, 3, 6}));
}

TEST(PlanCrops, SmallSceneGivesOneClampedCrop) {
    const auto m = OccupancyMask::full({40, 30, 20});
    const auto L = plan_crops(m);
    ASSERT_EQ(L.crops(), 1u);
    EXPECT_EQ(L.boxes[0].size, (GridExtent{40, 30, 20}));
    EXPECT_EQ(L.boxes[0].origin, (VoxelCoord{0, 0, 0}));
    EXPECT_THROW(plan_crops(m, {16, 16, 16}, 16), InputError);
    EXPECT_NO_THROW(plan_crops(m, {64, 16, 64}, 8));
}

TEST(PlanCrops, CoverMatchesBruteForce) {
    Rng rng(3);
    const GridExtent e{40, 27, 12};
    const auto m = random_mask(rng, e, 0.3);
    const auto L = plan_crops(m, {16, 12, 8}, 5);
    for (const auto& b : L.boxes) {
        EXPECT_LE(b.origin.i + b.size.h, e.h);
        EXPECT_LE(b.origin.j + b.size.w, e.w);
        EXPECT_LE(b.origin.k + b.size.l, e.l);
    }
    for (const auto& p : m.coords()) {
        std::vector<int> expect;
        for (std::size_t k = 0; k < L.crops(); ++k)
            if (L.boxes[k].contains(p))
                expect.push_back(int(k));
        EXPECT_EQ(L.cover(p), expect);
        EXPECT_GE(expect.size(), 1u);
    }
    // Interior of the first overlap band along i: [11, 16).
    for (const auto& p : m.coords())
        if (p.i >= 11 && p.i < 16) {
            EXPECT_GE(L.cover(p).size(), 2u);
        }
    EXPECT_TRUE(L.cover({0, 0, 0}).empty() || m.find({0, 0, 0}) >= 0);
}

TEST(PlanCrops, EmptyCropsAreDropped) {
    const GridExtent e{64, 16, 16};
    std::vector<VoxelCoord> c;
    for (int i = 0; i < 10; ++i)
        c.push_back({i, 3, 3});
    const auto L = plan_crops(OccupancyMask(e, c), {16, 16, 16}, 4);
    ASSERT_EQ(L.crops(), 1u);
    EXPECT_EQ(L.boxes[0].origin.i, 0);
    EXPECT_EQ(L.cover_entries.size(), 10u);
}

TEST(StochasticFuse, SingleCoverIsIdentityAndAgreementIsExact) {
    Rng rng(5);
    const auto m = random_mask(rng, {20, 20, 6}, 0.5);
    const auto L1 = plan_crops(m, {32, 32, 8}, 8);
    const auto x = random_values(m, 2, rng);
    const auto crops = split_to_crops(x, L1);
    EXPECT_TRUE(stochastic_fuse(crops, {7}, L1, CounterRng{1}).identical(x));
    EXPECT_TRUE(average_fuse(crops, L1).identical(x));

    const auto L = plan_crops(m, {8, 8, 6}, 3);
    ASSERT_GT(L.crops(), 1u);
    const auto split = split_to_crops(x, L);
    for (std::uint64_t seed = 0; seed < 5; ++seed)
        EXPECT_TRUE(stochastic_fuse(split, std::vector<int>(L.crops(), 3), L, CounterRng{seed}).identical(x));
    EXPECT_THROW(stochastic_fuse(split, std::vector<int>(L.crops(), 3), plan_crops(m, {8, 8, 6}, 2), CounterRng{}),
                 InputError);
    auto mixed = std::vector<int>(L.crops(), 3);
    mixed.back() = 4;
    EXPECT_THROW(stochastic_fuse(split, mixed, L, CounterRng{}), InputError);
}

TEST(StochasticFuse, WriteBackSynchronizesSharedVoxels) {
    Rng rng(6);
    const auto m = random_mask(rng, {24, 24, 6}, 0.6);
    const auto L = plan_crops(m, {10, 10, 6}, 4);
    std::vector<SparseVolume> crops;
    for (const auto& lm : L.local)
        crops.push_back(random_values(lm, 1, rng));
    const auto fused = stochastic_fuse(crops, std::vector<int>(L.crops(), 1), L, CounterRng{9});
    write_back(fused, L, crops);
    for (std::size_t r = 0; r < m.size(); ++r) {
        const float v = fused.at(r, 0);
        for (int e = L.cover_offset[r]; e < L.cover_offset[r + 1]; ++e) {
            const auto [k, lr] = L.cover_entries[std::size_t(e)];
            ASSERT_EQ(crops[std::size_t(k)].at(std::size_t(lr), 0), v);
        }
    }
}

TEST(StochasticFuse, ChoiceIsUniformOverCover) {
    const auto L = stacked_layout(3);
    std::vector<double> counts(3);
    std::vector<SparseVolume> crops;
    for (int k = 0; k < 3; ++k) {
        crops.emplace_back(L.local[std::size_t(k)], 1);
        crops.back().at(0, 0) = float(k);
    }
    for (int t = 0; t < 30000; ++t)
        counts[std::size_t(stochastic_fuse(crops, {t, t, t}, L, CounterRng{11}).at(0, 0))] += 1;
    EXPECT_GT(stats::chi_square_uniform_p(counts), 0.01);
}

TEST(Fusion, VarianceLawMonteCarlo) {
    Rng rng(12);
    for (int k : {2, 3}) {
        const auto L = stacked_layout(k);
        std::vector<double> st, av;
        for (int trial = 0; trial < 10000; ++trial) {
            std::vector<SparseVolume> crops;
            for (const auto& lm : L.local)
                crops.push_back(random_values(lm, 1, rng));
            st.push_back(stochastic_fuse(crops, std::vector<int>(std::size_t(k), trial), L, CounterRng{4}).at(0, 0));
            av.push_back(average_fuse(crops, L).at(0, 0));
        }
        const auto vs = stats::variance_of(st), va = stats::variance_of(av);
        EXPECT_NEAR(vs.variance, 1.0, 3 * vs.stderr_variance) << "k=" << k;
        EXPECT_NEAR(va.variance, 1.0 / k, 3 * va.stderr_variance) << "k=" << k;
    }
}

TEST(Fusion, AverageOfTwoValues) {
    const auto L = stacked_layout(2);
    std::vector<SparseVolume> crops{SparseVolume(L.local[0], 1), SparseVolume(L.local[1], 1)};
    crops[0].at(0, 0) = 1.0f;
    crops[1].at(0, 0) = 3.0f;
    EXPECT_EQ(average_fuse(crops, L).at(0, 0), 2.0f);
}

TEST(FusedLoop, InitialNoiseIsSharedAndStandardNormal) {
    Rng rng(13);
    const auto m = random_mask(rng, {48, 48, 8}, 0.7);
    const auto L = plan_crops(m, {16, 16, 8}, 6);
    NoiseField noise;
    noise.rng = CounterRng{77};
    noise.global = m.extent();
    const auto fields = crop_noise_fields(L, noise, FusionMode::Stochastic);
    std::vector<SparseVolume> crops;
    for (std::size_t k = 0; k < L.crops(); ++k)
        crops.push_back(fields[k].volume(L.local[k], 1, 0));
    const auto fused = stochastic_fuse(crops, std::vector<int>(L.crops(), 0), L, CounterRng{1});
    EXPECT_TRUE(fused.identical(noise.volume(m, 1, 0)));
    std::vector<double> xs(fused.data().begin(), fused.data().end());
    const auto v = stats::variance_of(xs);
    EXPECT_NEAR(v.mean, 0.0, 3.0 / std::sqrt(double(xs.size())));
    EXPECT_NEAR(v.variance, 1.0, 3 * v.stderr_variance);

    const auto indep = crop_noise_fields(L, noise, FusionMode::Independent);
    EXPECT_FALSE(indep[0].volume(L.local[0], 1, 0).identical(crops[0]));
}

TEST(FusedLoop, SingleCropEqualsPlainSampling) {
    Rng init(1);
    DenoiserSpec spec;
    spec.cond_channels = 1;
    spec.base_channels = 8;
    spec.emb_dim = 8;
    const Denoiser<float> model(spec, init);
    Rng mrng(2);
    const auto m = random_mask(mrng, {8, 8, 8}, 0.4);
    SparseVolume cond(m, 1);
    for (auto& v : cond.data())
        v = 0.25f;
    const auto sched = make_linear_schedule(200);
    for (auto kind : {SamplerKind::Ddim, SamplerKind::Ddpm}) {
        SamplerOptions opt{kind, 20, ClipRange{}};
        Rng a(42), b(42);
        const auto direct = sample(model.predictor(), m, 1, &cond, sched, opt, a);
        NoiseField field;
        field.rng = CounterRng{b.next()};
        field.global = m.extent();
        const auto L = plan_crops(m, {96, 96, 96}, 32);
        ASSERT_EQ(L.crops(), 1u);
        for (auto mode : {FusionMode::Stochastic, FusionMode::Average}) {
            const auto fused = fused_diffusion_loop(model.predictor(), L, 1, &cond, sched, opt, {mode, 1}, field);
            EXPECT_TRUE(fused.identical(direct)) << to_string(mode);
        }
    }
}

TEST(FusedLoop, DeterministicAcrossThreadCounts) {
    Rng init(3);
    DenoiserSpec spec;
    spec.base_channels = 8;
    spec.emb_dim = 8;
    const Denoiser<float> model(spec, init);
    Rng mrng(4);
    const auto m = random_mask(mrng, {24, 16, 8}, 0.5);
    const auto L = plan_crops(m, {8, 8, 8}, 2);
    ASSERT_GT(L.crops(), 4u);
    NoiseField field;
    field.rng = CounterRng{5};
    field.global = m.extent();
    const auto sched = make_linear_schedule(100);
    for (auto mode : {FusionMode::Stochastic, FusionMode::Average, FusionMode::Independent}) {
        const SamplerOptions opt{SamplerKind::Ddpm, 6, ClipRange{}};
        const auto a = fused_diffusion_loop(model.predictor(), L, 1, nullptr, sched, opt, {mode, 1}, field);
        const auto b = fused_diffusion_loop(model.predictor(), L, 1, nullptr, sched, opt, {mode, 3}, field);
        EXPECT_TRUE(a.identical(b)) << to_string(mode);
        EXPECT_TRUE(a.mask().same_as(m));
    }
}

TEST(FusedLoop, CoverageGapIsRejected) {
    const auto m = OccupancyMask::full({8, 8, 8});
    const auto L = bind_layout(m, {CropBox{{0, 0, 0}, {4, 8, 8}}});
    const auto sched = make_linear_schedule(100);
    EXPECT_THROW(fused_diffusion_loop(toy::smoothing_model(), L, 1, nullptr, sched, {}, {}, NoiseField{}), InputError);
}

TEST(FusedLoop, StochasticFusionHasNoSeam) {
    const auto m = OccupancyMask::full({48, 24, 8});
    const auto L = plan_crops(m, {32, 24, 8}, 16);
    ASSERT_EQ(L.crops(), 2u);
    SparseVolume cond(m, 1);
    for (auto& v : cond.data())
        v = 0.5f;
    const auto sched = make_linear_schedule(1000);
    const SamplerOptions opt{SamplerKind::Ddim, 50, std::nullopt};
    // Per-pair expected discontinuity, averaged over independent runs.
    const int runs = 16;
    PairDifferences fused_avg, indep_avg;
    for (int run = 0; run < runs; ++run) {
        NoiseField field;
        field.rng = CounterRng{std::uint64_t(100 + run)};
        field.global = m.extent();
        const auto f = pair_differences(
            fused_diffusion_loop(toy::smoothing_model(), L, 1, &cond, sched, opt, {FusionMode::Stochastic, 1}, field), L);
        const auto i = pair_differences(
            fused_diffusion_loop(toy::smoothing_model(), L, 1, &cond, sched, opt, {FusionMode::Independent, 1}, field), L);
        if (run == 0) {
            fused_avg = f;
            indep_avg = i;
            continue;
        }
        for (std::size_t p = 0; p < f.diff.size(); ++p) {
            fused_avg.diff[p] += f.diff[p];
            indep_avg.diff[p] += i.diff[p];
        }
    }
    for (std::size_t p = 0; p < fused_avg.diff.size(); ++p) {
        fused_avg.diff[p] /= runs;
        indep_avg.diff[p] /= runs;
    }
    const auto s = seam_statistics(fused_avg), i = seam_statistics(indep_avg);
    EXPECT_EQ(s.seam_pairs, 24u * 8u);
    EXPECT_LE(s.seam_max, s.intra_p99);
    EXPECT_GT(i.seam_max, i.intra_p99);
    EXPECT_GT(i.seam_mean / i.intra_mean, 2.0 * s.seam_mean / s.intra_mean);
}

TEST(Refine, ConditionChannelsAndMismatch) {
    Rng rng(8);
    const auto m = random_mask(rng, {8, 8, 8}, 0.5);
    const auto t = random_values(m, 1, rng);
    const auto c = refine_condition(m, &t);
    EXPECT_EQ(c.channels(), 2);
    for (std::size_t r = 0; r < m.size(); ++r) {
        EXPECT_EQ(c.at(r, 0), t.at(r, 0));
        EXPECT_EQ(c.at(r, 1), 1.0f);
    }
    const auto blank = refine_condition(m, nullptr);
    for (float v : blank.data())
        EXPECT_EQ(v, 0.0f);
    const auto other = random_values(random_mask(rng, {8, 8, 8}, 0.5), 1, rng);
    EXPECT_THROW(refine_condition(m, &other), InputError);
}

namespace {

SparseVolume sphere_shell(const VoxelGrid& grid, const Vec3& c, double radius) {
    const GridExtent e = grid.extent;
    std::vector<VoxelCoord> coords;
    std::vector<float> vals;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j)
            for (int k = 0; k < e.l; ++k) {
                const double d = (norm(grid.center({i, j, k}) - c) - radius) / grid.voxel_size;
                if (std::abs(d) < 3.0) {
                    coords.push_back({i, j, k});
                    vals.push_back(float(d));
                }
            }
    SparseVolume v(OccupancyMask(e, coords), 1);
    std::copy(vals.begin(), vals.end(), v.data().begin());
    return v;
}

} // namespace

TEST(Refine, PlantedModelRecoversSphereShell) {
    const GridExtent e{24, 24, 24};
    const VoxelGrid grid{{0, 0, 0}, 0.04, e};
    const auto target = sphere_shell(grid, {0.48, 0.48, 0.48}, 0.3);
    const auto& m = target.mask();
    RefineOptions opt;
    opt.sampler.steps = 10;
    const auto out = refine_from_occupancy(m, nullptr, toy::planted_model(target), make_linear_schedule(500), grid, opt, 3);
    EXPECT_TRUE(out.tsdf.mask().same_as(m));
    ASSERT_FALSE(out.mesh.empty());
    EXPECT_TRUE(out.mesh.is_closed());
    // Euler characteristic of a genus-0 surface.
    std::set<std::pair<int, int>> edges;
    for (const auto& t : out.mesh.triangles)
        for (int a = 0; a < 3; ++a)
            edges.insert(std::minmax(t[std::size_t(a)], t[std::size_t((a + 1) % 3)]));
    EXPECT_EQ(long(out.mesh.vertices.size()) - long(edges.size()) + long(out.mesh.triangles.size()), 2);
    EXPECT_THROW(refine_from_occupancy(OccupancyMask(e, {}), nullptr, toy::planted_model(target), make_linear_schedule(500),
                                       grid, opt, 3),
                 InputError);
}

TEST(Refine, ConditionedOutputIsCloserThanOccupancyOnly) {
    const GridExtent e{32, 32, 24};
    const VoxelGrid grid{{0, 0, 0}, 0.04, e};
    const auto gt = sphere_shell(grid, {0.64, 0.64, 0.48}, 0.36);
    RefineOptions opt;
    opt.crop = {16, 16, 16};
    opt.overlap = 6;
    opt.sampler.steps = 10;
    opt.fusion.threads = 2;
    const auto sched = make_linear_schedule(500);
    const auto model = toy::condition_copy_model();
    const auto cond = refine_from_occupancy(gt.mask(), &gt, model, sched, grid, opt, 5);
    const auto occ = refine_from_occupancy(gt.mask(), nullptr, model, sched, grid, opt, 5);
    double l1_cond = 0, l1_occ = 0;
    for (std::size_t r = 0; r < gt.size(); ++r) {
        l1_cond += std::abs(cond.tsdf.values.at(r, 0) - gt.at(r, 0));
        l1_occ += std::abs(occ.tsdf.values.at(r, 0) - gt.at(r, 0));
    }
    EXPECT_LT(l1_cond / double(gt.size()), 1e-4);
    EXPECT_LT(l1_cond, l1_occ);
    EXPECT_TRUE(cond.mesh.is_closed());
}
