// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale end-to-end run: autoencoder on 32 synthetic rooms, three latent diffusion stages,
// a stage-3 overfit to one room, and seam statistics of fused versus independent generation.
//
#pragma once

#include <dids/cascade/pipeline.hpp>
#include <dids/cascade/training.hpp>
#include <dids/geometry/synthetic.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>

namespace dids::acceptance {

struct Result {
    bool pass = false;
    std::string detail;
};

struct ToySettings {
    std::uint64_t seed = 2024;
    int rooms = 32;
    GridExtent extent{64, 64, 32};
    long vq_steps = 800;
    long latent_steps = 1500;
    int latent_batch = 4;
    long stage3_steps = 2500;
    GridExtent stage3_crop{32, 32, 32};
    int sample_steps = 50;
    GridExtent fusion_crop{40, 40, 32};
    int fusion_overlap = 16;
    int generation_seeds = 4;
};

inline CascadeConfig toy_config(const ToySettings& s) {
    CascadeConfig cfg;
    cfg.vq.channels = 16;
    cfg.vq.fine_channels = 8;
    cfg.vq.codebook_size = 256;
    cfg.vq.latent_dim = 4;
    cfg.vq.disc_start = s.vq_steps / 2;
    cfg.vq_adam.lr = 2e-3;
    cfg.disc_adam.lr = 2e-3;
    for (auto& st : cfg.stage) {
        st.denoiser.base_channels = 16;
        st.denoiser.emb_dim = 16;
        st.denoiser.levels = 1;
        st.adam.lr = 2e-3;
        st.sampler.steps = s.sample_steps;
    }
    cfg.stage[2].denoiser.levels = 2;
    cfg.crop = s.fusion_crop;
    cfg.overlap = s.fusion_overlap;
    cfg.finalize();
    return cfg;
}

namespace detail {

class Clock {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void progress(const Clock& c, const std::string& msg) {
    std::fprintf(stderr, "  [%7.1f s] %s\n", c.seconds(), msg.c_str());
}

inline void train_latent_stage(int stage, Denoiser<float>& model, const StageConfig& st,
                               const std::vector<dids::SceneLatents>& latents, const ToySettings& s, Rng& rng,
                               const Clock& clock) {
    Adam<float> opt(st.adam);
    const auto sched = st.schedule.make();
    double window = 0;
    for (long step = 0; step < s.latent_steps; ++step) {
        std::vector<DiffusionSample> batch;
        for (int b = 0; b < s.latent_batch; ++b)
            batch.push_back(dids::stage_training_sample(stage, latents[std::size_t(rng.below(latents.size()))]));
        window += train_step(batch, model, sched, opt, rng);
        if ((step + 1) % 250 == 0) {
            progress(clock, "stage " + std::to_string(stage) + " step " + std::to_string(step + 1) + " loss " +
                                std::to_string(window / 250));
            window = 0;
        }
    }
}

inline double mean_abs_error_on_shared(const SparseVolume& pred, const SparseVolume& truth, std::size_t* shared) {
    double err = 0;
    std::size_t n = 0;
    const auto& coords = pred.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int q = truth.mask().find(coords[r]);
        if (q < 0)
            continue;
        err += std::abs(double(pred.at(r, 0)) - double(truth.at(std::size_t(q), 0)));
        ++n;
    }
    *shared = n;
    return n ? err / double(n) : std::numeric_limits<double>::infinity();
}

inline void append(PairDifferences& to, const PairDifferences& from) {
    to.diff.insert(to.diff.end(), from.diff.begin(), from.diff.end());
    to.seam.insert(to.seam.end(), from.seam.begin(), from.seam.end());
}

inline std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0, double e = 0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c, d, e);
    return buf;
}

} // namespace detail

inline Result toy_end_to_end(const ToySettings& s = {}) {
    using detail::fmt;
    using detail::progress;
    const detail::Clock clock;
    const auto cfg = toy_config(s);
    Rng rng(s.seed);

    const auto rooms = synthetic_rooms(s.seed, s.extent, s.rooms);
    progress(clock, std::to_string(rooms.size()) + " rooms synthesized");

    // (a) autoencoder
    OccupancyAutoencoder<float> vq(cfg.vq, rng);
    {
        Adam<float> opt(cfg.vq_adam), opt_disc(cfg.disc_adam);
        std::vector<TsdfVolume> data;
        for (const auto& r : rooms)
            data.push_back(r.tsdf);
        TrainConfig tc = cfg.train;
        tc.crop = s.extent;
        tc.rotate = false;
        tc.log_every = 100;
        train_vq(vq, opt, opt_disc, data, tc, rng, 0, s.vq_steps, [&](long step, const VqLossReport& r) {
            progress(clock, "vq step " + std::to_string(step) + fmt(" total %.4f bce_x %.4f l1 %.4f iou %.3f", r.total, r.bce_x,
                                                                     r.l1, r.iou_x));
        });
    }
    double iou = 0;
    for (const auto& r : rooms)
        iou += vq.reconstruct(r.tsdf.values).mask_x.iou(r.tsdf.values.mask());
    iou /= double(rooms.size());
    const bool pass_a = iou > 0.9;
    progress(clock, fmt("(a) mean M_x IoU %.4f", iou));

    std::vector<dids::SceneLatents> latents;
    for (const auto& r : rooms)
        latents.push_back(dids::encode_scene(vq, r.tsdf.values));

    // stages 1 and 2 on cached latents
    auto d1 = std::make_shared<Denoiser<float>>(cfg.stage[0].denoiser, rng);
    auto d2 = std::make_shared<Denoiser<float>>(cfg.stage[1].denoiser, rng);
    detail::train_latent_stage(1, *d1, cfg.stage[0], latents, s, rng, clock);
    detail::train_latent_stage(2, *d2, cfg.stage[1], latents, s, rng, clock);

    // stage 3 overfit to room 0, trained on its crops
    auto d3 = std::make_shared<Denoiser<float>>(cfg.stage[2].denoiser, rng);
    {
        const auto full = dids::stage_training_sample(3, latents[0]);
        const auto layout = plan_crops(full.volume.mask(), s.stage3_crop, 0);
        const auto xs = split_to_crops(full.volume, layout), cs = split_to_crops(*full.condition, layout);
        std::vector<DiffusionSample> crops;
        for (std::size_t k = 0; k < xs.size(); ++k)
            if (!xs[k].empty())
                crops.push_back({xs[k], cs[k]});
        Adam<float> opt(cfg.stage[2].adam);
        const auto sched = cfg.stage[2].schedule.make();
        double window = 0;
        for (long step = 0; step < s.stage3_steps; ++step) {
            window += train_step({crops[std::size_t(rng.below(crops.size()))]}, *d3, sched, opt, rng);
            if ((step + 1) % 250 == 0) {
                progress(clock, "stage 3 step " + std::to_string(step + 1) + " loss " + std::to_string(window / 250));
                window = 0;
            }
        }
    }

    CascadeModels models;
    models.vq = std::make_shared<const OccupancyAutoencoder<float>>(vq);
    const std::array<std::shared_ptr<Denoiser<float>>, 3> nets{d1, d2, d3};
    for (std::size_t k = 0; k < 3; ++k) {
        models.eps[k] = nets[k]->predictor();
        models.denoisers[k] = nets[k];
    }

    // (b) regenerate room 0 from its own latents
    std::size_t shared = 0;
    Rng rb(Rng::mix(s.seed ^ 0xb));
    const auto regen = stage3_sample(models, cfg, latents[0].z1, latents[0].z2, rb);
    const double err = detail::mean_abs_error_on_shared(regen, rooms[0].tsdf.values, &shared);
    const bool pass_b = err < 0.3;
    progress(clock, fmt("(b) mean |TSDF error| %.4f on %.0f shared voxels", err, double(shared)));

    // (c) seams of full generation, stochastic fusion versus independent crops
    PairDifferences pooled[2];
    std::size_t crops_seen = 0;
    const FusionMode modes[2] = {FusionMode::Stochastic, FusionMode::Independent};
    for (int m = 0; m < 2; ++m) {
        auto c = cfg;
        c.fusion = modes[m];
        for (int k = 0; k < s.generation_seeds; ++k) {
            const auto g = generate_scene(models, c, s.extent, s.seed + 100 + std::uint64_t(k));
            const auto layout = plan_crops(g.stages.mask_x, c.crop, c.overlap);
            crops_seen = std::max(crops_seen, layout.crops());
            detail::append(pooled[m], pair_differences(g.stages.tsdf, layout));
            progress(clock, std::string("(c) ") + to_string(modes[m]) + " seed " + std::to_string(k) + ": " +
                                std::to_string(g.stages.mask_x.size()) + " voxels, " + std::to_string(layout.crops()) + " crops");
        }
    }
    const auto st = seam_statistics(pooled[0]), in = seam_statistics(pooled[1]);
    const double ratio_st = st.seam_mean / st.intra_mean, ratio_in = in.seam_mean / in.intra_mean;
    const bool fused_ok = st.seam_mean <= st.intra_mean + 3 * st.seam_stderr;
    const bool indep_ok = ratio_in >= 2 * ratio_st;
    const bool pass_c = crops_seen > 1 && fused_ok && indep_ok;
    progress(clock, fmt("(c) stochastic seam %.4f intra %.4f; independent seam %.4f intra %.4f", st.seam_mean, st.intra_mean,
                        in.seam_mean, in.intra_mean));

    const double total = clock.seconds();
    const bool pass_time = total < 7200;
    const auto mark = [](bool ok) { return std::string(ok ? "" : " FAIL"); };
    return {pass_a && pass_b && pass_c && pass_time,
            fmt("(a) IoU %.4f", iou) + mark(pass_a) + fmt("; (b) mean |error| %.4f", err) + mark(pass_b) +
                fmt("; (c) stochastic seam/intra %.3f, independent %.3f (%.2fx)", ratio_st, ratio_in, ratio_in / ratio_st) +
                mark(pass_c) + fmt("; total %.0f s", total) + mark(pass_time)};
}

} // namespace dids::acceptance
