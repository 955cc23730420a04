// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#include "oracles.hpp"

#include <dids/diffusion/trainer.hpp>

#include <gtest/gtest.h>

#include <numbers>

using namespace dids;

namespace {

// Closed form of the squared-cosine profile, evaluated directly.
double cosine_alpha_bar(int t, int steps, double s = 0.008) {
    auto f = [&](double u) {
        const double c = std::cos((u / steps + s) / (1 + s) * std::numbers::pi / 2);
        return c * c;
    };
    return f(t) / f(0);
}

// Mean and standard deviation of a list of scalars.
std::pair<double, double> moments(const std::vector<double>& v) {
    double m = 0, q = 0;
    for (double x : v)
        m += x;
    m /= double(v.size());
    for (double x : v)
        q += (x - m) * (x - m);
    return {m, std::sqrt(q / double(v.size()))};
}

// Exact noise prediction for a known clean sample.
EpsPredictor perfect_denoiser(const SparseVolume& x0) {
    return [x0](const SparseVolume& xt, const SparseVolume*, double ab) {
        SparseVolume eps = xt.zeros_like();
        for (std::size_t i = 0; i < eps.data().size(); ++i)
            eps.data()[i] = float((double(xt.data()[i]) - std::sqrt(ab) * double(x0.data()[i])) / std::sqrt(1.0 - ab));
        return eps;
    };
}

SparseVolume scalar_volume(float v) { return SparseVolume(OccupancyMask({1, 1, 1}, {{0, 0, 0}}), 1, {v}); }

} // namespace

TEST(Schedule, LinearEndpointsAndProducts) {
    auto s2 = make_linear_schedule(2);
    EXPECT_DOUBLE_EQ(s2.beta(1), 1e-6);
    EXPECT_DOUBLE_EQ(s2.beta(2), 0.01);

    auto s1 = make_linear_schedule(1);
    EXPECT_DOUBLE_EQ(s1.beta(1), 1e-6);
    EXPECT_DOUBLE_EQ(s1.alpha_bar(1), 1.0 - 1e-6);

    auto s3 = make_linear_schedule(3, 0.1, 0.3);
    const double b[3] = {0.1, 0.2, 0.3};
    EXPECT_NEAR(s3.alpha_bar(1), 0.9, 1e-15);
    EXPECT_NEAR(s3.alpha_bar(2), 0.9 * 0.8, 1e-15);
    EXPECT_NEAR(s3.alpha_bar(3), (1 - b[0]) * (1 - b[1]) * (1 - b[2]), 1e-15);
    EXPECT_DOUBLE_EQ(s3.alpha_bar(0), 1.0);

    auto full = make_linear_schedule();
    EXPECT_EQ(full.steps(), 2000);
    EXPECT_NEAR(full.beta(1000) - full.beta(999), (0.01 - 1e-6) / 1999, 1e-15);

    EXPECT_THROW(make_linear_schedule(10, 0.2, 0.1), InputError);
    EXPECT_THROW(make_linear_schedule(10, 0.0, 0.1), InputError);
    EXPECT_THROW(make_linear_schedule(10, 0.1, 1.0), InputError);
    EXPECT_THROW(full.alpha_bar(2001), InputError);
}

TEST(Schedule, CosineProfile) {
    auto s = make_cosine_schedule();
    EXPECT_LT(s.alpha_bar(2000), 1e-3);
    for (int t = 1; t <= 2000; ++t) {
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        EXPECT_LE(s.beta(t), 0.999);
    }

    auto s10 = make_cosine_schedule(10);
    for (int t = 1; t <= 9; ++t)
        EXPECT_NEAR(s10.alpha_bar(t), cosine_alpha_bar(t, 10), 1e-12) << t;
    // The final step reaches cos^2(pi/2) = 0 and is clipped.
    EXPECT_DOUBLE_EQ(s10.beta(10), 0.999);
    EXPECT_NEAR(s10.alpha_bar(10), s10.alpha_bar(9) * 0.001, 1e-15);
}

TEST(Schedule, StridedTimestepsSelectEveryTenth) {
    auto s = make_cosine_schedule();
    auto plan = strided_timesteps(s, 200);
    ASSERT_EQ(plan.size(), 200u);
    for (std::size_t i = 0; i < plan.size(); ++i) {
        EXPECT_EQ(plan[i].first, 2000 - 10 * int(i));
        EXPECT_EQ(plan[i].second, 2000 - 10 * int(i + 1));
    }
    EXPECT_TRUE(strided_timesteps(s, 0).empty());
    EXPECT_EQ(strided_timesteps(make_linear_schedule(5), 50).size(), 5u);
}

TEST(QSample, Endpoints) {
    Rng rng(1);
    auto x0 = oracle::random_volume<float>(rng, {3, 3, 3}, 2, 0.5);
    auto noise = x0.zeros_like();
    for (auto& v : noise.data())
        v = float(rng.normal());
    auto s = make_cosine_schedule();
    EXPECT_TRUE(q_sample(x0, 0, noise, s).identical(x0));
    auto xt = q_sample(x0, 2000, noise, s);
    for (std::size_t i = 0; i < xt.data().size(); ++i)
        EXPECT_NEAR(xt.data()[i], noise.data()[i], 0.05 * (1 + std::abs(x0.data()[i])));
    EXPECT_THROW(q_sample(x0, 2001, noise, s), InputError);
    EXPECT_THROW(q_sample(x0, -1, noise, s), InputError);
}

TEST(QSample, MonteCarloMomentsMatchClosedForm) {
    const int trials = 10000;
    for (const auto& s : {make_linear_schedule(), make_cosine_schedule()}) {
        for (int t : {1, 100, 500, 1000, 2000}) {
            Rng rng(std::uint64_t(t) * 7 + s.kind().size());
            const double x0v = 0.7;
            const double ab = s.alpha_bar(t);
            std::vector<double> xs(trials);
            for (int n = 0; n < trials; ++n)
                xs[n] = q_sample(scalar_volume(float(x0v)), t, scalar_volume(float(rng.normal())), s).data()[0];
            auto [m, sd] = moments(xs);
            const double sigma = std::sqrt(1 - ab);
            // Standard errors of the sample mean and (for Gaussian data) the sample standard deviation.
            EXPECT_NEAR(m, std::sqrt(ab) * x0v, 3 * sigma / std::sqrt(trials) + 1e-6) << s.kind() << " t=" << t;
            EXPECT_NEAR(sd, sigma, 3 * sigma / std::sqrt(2.0 * trials) + 1e-6) << s.kind() << " t=" << t;
        }
    }
}

TEST(QSample, MatchesComposedSingleSteps) {
    // x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps, iterated t times.
    auto s = make_linear_schedule(200, 1e-4, 0.05);
    const int trials = 10000;
    for (int t : {1, 20, 200}) {
        Rng rng(40 + t);
        std::vector<double> composed(trials), closed(trials);
        for (int n = 0; n < trials; ++n) {
            double x = -1.2;
            for (int k = 1; k <= t; ++k)
                x = std::sqrt(s.alpha(k)) * x + std::sqrt(s.beta(k)) * rng.normal();
            composed[n] = x;
            closed[n] = q_sample(scalar_volume(-1.2f), t, scalar_volume(float(rng.normal())), s).data()[0];
        }
        auto [m1, sd1] = moments(composed);
        auto [m2, sd2] = moments(closed);
        const double sigma = std::sqrt(1 - s.alpha_bar(t));
        EXPECT_NEAR(m1, m2, 3 * sigma * std::sqrt(2.0 / trials) + 1e-6) << t;
        EXPECT_NEAR(sd1, sd2, 3 * sigma * std::sqrt(1.0 / trials) + 1e-6) << t;
    }
}

TEST(Ddpm, ScalarMeanMatchesHandEvaluation) {
    // alpha_2 = 0.99 and alpha_bar_2 = 0.5.
    NoiseSchedule s({1.0 - 0.5 / 0.99, 0.01});
    ASSERT_NEAR(s.alpha_bar(2), 0.5, 1e-15);
    auto mu = ddpm_reverse_step(scalar_volume(1.f), 2, scalar_volume(1.f), s, nullptr);
    EXPECT_NEAR(mu.data()[0], (1 - 0.01 / std::sqrt(0.5)) / std::sqrt(0.99), 1e-6);

    auto z = scalar_volume(1.f);
    auto noisy = ddpm_reverse_step(scalar_volume(1.f), 2, scalar_volume(1.f), s, &z);
    EXPECT_NEAR(noisy.data()[0] - mu.data()[0], std::sqrt(0.01), 1e-6);

    // No noise is injected on the final step.
    auto last = ddpm_reverse_step(scalar_volume(1.f), 1, scalar_volume(0.f), s, &z);
    EXPECT_NEAR(last.data()[0], 1.0 / std::sqrt(s.alpha(1)), 1e-5);

    EXPECT_THROW(ddpm_reverse_step(scalar_volume(1.f), 0, scalar_volume(0.f), s, nullptr), InputError);
}

TEST(Ddpm, ZeroNoiseTinyBetaIsNearIdentity) {
    auto s = make_linear_schedule(10, 1e-9, 1e-8);
    auto x = ddpm_reverse_step(scalar_volume(0.8f), 5, scalar_volume(0.f), s, nullptr);
    EXPECT_NEAR(x.data()[0], 0.8, 1e-6);
}

TEST(Ddpm, PerfectDenoiserErrorDecreasesMonotonically) {
    auto s = make_linear_schedule(200, 1e-4, 0.05);
    Rng rng(5);
    auto x0 = oracle::random_volume<float>(rng, {4, 4, 4}, 1, 0.5);
    auto noise = x0.zeros_like();
    for (auto& v : noise.data())
        v = float(rng.normal());
    auto model = perfect_denoiser(x0);
    auto x = q_sample(x0, 200, noise, s);
    auto err = [&](const SparseVolume& v) {
        double e = 0;
        for (std::size_t i = 0; i < v.data().size(); ++i)
            e += std::abs(double(v.data()[i]) - double(x0.data()[i]));
        return e / double(v.data().size());
    };
    double prev = err(x);
    for (int t = 200; t >= 1; --t) {
        x = ddpm_reverse_step(x, t, model(x, nullptr, s.alpha_bar(t)), s, nullptr);
        const double e = err(x);
        EXPECT_LE(e, prev + 1e-6) << t;
        prev = e;
    }
    EXPECT_LT(prev, 1e-4);
}

TEST(Ddim, PerfectEpsRecoversCleanSampleInOneStep) {
    auto s = make_cosine_schedule();
    Rng rng(6);
    auto x0 = oracle::random_volume<float>(rng, {4, 4, 4}, 2, 0.6);
    auto noise = x0.zeros_like();
    for (auto& v : noise.data())
        v = float(rng.normal());
    for (int t : {1, 50, 700, 1500}) {
        auto xt = q_sample(x0, t, noise, s);
        auto eps = perfect_denoiser(x0)(xt, nullptr, s.alpha_bar(t));
        auto back = ddim_step(xt, t, 0, eps, s);
        for (std::size_t i = 0; i < back.data().size(); ++i)
            EXPECT_NEAR(back.data()[i], x0.data()[i], 1e-4) << t;
    }
    auto xt = q_sample(x0, 30, noise, s);
    EXPECT_TRUE(ddim_step(xt, 30, 30, noise, s).identical(xt));
    EXPECT_THROW(ddim_step(xt, 30, 31, noise, s), InputError);
}

TEST(Ddim, ClipBoundsPredictedCleanSample) {
    auto s = make_cosine_schedule();
    auto xt = scalar_volume(10.f);
    auto out = ddim_step(xt, 100, 0, scalar_volume(0.f), s, ClipRange{});
    EXPECT_FLOAT_EQ(out.data()[0], 3.f);
}

TEST(MaskedMse, Values) {
    Rng rng(7);
    auto a = oracle::random_volume<double>(rng, {5, 5, 5}, 3, 0.4);
    EXPECT_EQ(masked_mse_loss(a, a).value, 0.0);

    auto b = a;
    for (auto& v : b.data())
        v += 0.25;
    EXPECT_NEAR(masked_mse_loss(a, b).value, 0.0625, 1e-12);

    // Dense oracle: mean over masked entries of the densified difference.
    auto c = a.zeros_like();
    for (auto& v : c.data())
        v = rng.normal();
    const auto da = to_dense(a, 99.0).values, dc = to_dense(c, -99.0).values;
    const auto dense_mask = to_dense(ones_like_mask<double>(a.mask())).values;
    double s = 0, n = 0;
    for (std::size_t v = 0; v < dense_mask.size(); ++v) {
        if (dense_mask[v] == 0)
            continue;
        for (int ch = 0; ch < 3; ++ch) {
            const double d = da[v * 3 + ch] - dc[v * 3 + ch];
            s += d * d;
            n += 1;
        }
    }
    auto loss = masked_mse_loss(a, c);
    EXPECT_NEAR(loss.value, s / n, 1e-12);

    auto loss_fn = [&] { return masked_mse_loss(a, c).value; };
    auto res = oracle::check_gradient(c.data(), loss.grad.data(), loss_fn);
    EXPECT_LT(res.max_rel_error, 1e-3);

    BasicSparseVolume<double> empty(OccupancyMask({2, 2, 2}, {}), 1);
    EXPECT_THROW(masked_mse_loss(empty, empty), InputError);
}

TEST(AlphaEmbedding, Values) {
    auto e = alpha_embedding(0.25, 2);
    EXPECT_DOUBLE_EQ(e[0], std::sin(500.0));
    EXPECT_DOUBLE_EQ(e[1], std::cos(500.0));
    EXPECT_EQ(alpha_embedding(0.3, 16), alpha_embedding(0.3, 16));
    auto a = alpha_embedding(0.9, 16), b = alpha_embedding(0.1, 16);
    double d = 0;
    for (int i = 0; i < 16; ++i)
        d += (a[i] - b[i]) * (a[i] - b[i]);
    EXPECT_GT(d, 1e-3);
    EXPECT_THROW(alpha_embedding(0.5, 3), InputError);
    EXPECT_THROW(alpha_embedding(0.0, 4), InputError);
}

TEST(Sampler, ZeroStepsReturnsInitialNoise) {
    Rng rng(8);
    auto x = oracle::random_volume<float>(rng, {4, 4, 4}, 1, 0.3);
    NoiseField field{CounterRng{11}};
    SamplerOptions opt;
    opt.steps = 0;
    auto out = sample(perfect_denoiser(x), x.mask(), 1, nullptr, make_cosine_schedule(), opt, field);
    EXPECT_TRUE(out.identical(field.volume(x.mask(), 1, 0)));
}

TEST(Sampler, PerfectDenoiserRecoversCleanSample) {
    auto s = make_cosine_schedule();
    Rng rng(9);
    auto x0 = oracle::random_volume<float>(rng, {6, 6, 6}, 2, 0.3);
    for (auto kind : {SamplerKind::Ddim, SamplerKind::Ddpm}) {
        SamplerOptions opt;
        opt.kind = kind;
        opt.steps = 200;
        Rng r2(10);
        auto out = sample(perfect_denoiser(x0), x0.mask(), 2, nullptr, s, opt, r2);
        EXPECT_TRUE(out.mask().same_as(x0.mask()));
        double m = 0;
        for (std::size_t i = 0; i < out.data().size(); ++i)
            m = std::max(m, std::abs(double(out.data()[i]) - double(x0.data()[i])));
        EXPECT_LT(m, 1e-4);
    }
}

TEST(Sampler, NoiseFieldIsKeyedByGlobalPosition) {
    NoiseField a{CounterRng{3}, {0, 0, 0}, {16, 16, 16}};
    NoiseField b{CounterRng{3}, {4, 0, 8}, {16, 16, 16}};
    EXPECT_EQ(a.normal({5, 2, 9}, 7, 1), b.normal({1, 2, 1}, 7, 1));
    EXPECT_NE(a.normal({5, 2, 9}, 7, 1), a.normal({5, 2, 9}, 8, 1));
    EXPECT_NE(a.normal({5, 2, 9}, 7, 1), a.normal({5, 2, 9}, 7, 0));

    // Fixed seeds reproduce a DDPM trajectory exactly.
    Rng rng(12);
    auto x0 = oracle::random_volume<float>(rng, {4, 4, 4}, 1, 0.5);
    auto s = make_linear_schedule(100, 1e-4, 0.05);
    SamplerOptions opt{SamplerKind::Ddpm, 20, ClipRange{}};
    auto zero = [](const SparseVolume& x, const SparseVolume*, double) { return x.zeros_like(); };
    EXPECT_TRUE(sample(zero, x0.mask(), 1, nullptr, s, opt, a).identical(sample(zero, x0.mask(), 1, nullptr, s, opt, a)));
}

namespace {

DenoiserSpec tiny_spec(bool attention, int cond) {
    DenoiserSpec spec;
    spec.in_channels = 1;
    spec.cond_channels = cond;
    spec.base_channels = 4;
    spec.emb_dim = 4;
    spec.levels = 1;
    spec.attention = attention;
    spec.heads = 2;
    return spec;
}

} // namespace

TEST(Denoiser, ShapesAndZeroInitialOutput) {
    Rng rng(13);
    Denoiser<float> net(tiny_spec(true, 2), rng);
    auto x = oracle::random_volume<float>(rng, {8, 8, 8}, 1, 0.2);
    BasicSparseVolume<float> y(x.mask(), 2);
    auto out = net.forward(x, &y, 0.5);
    EXPECT_TRUE(out.mask().same_as(x.mask()));
    EXPECT_EQ(out.channels(), 1);
    for (float v : out.data())
        EXPECT_EQ(v, 0.f);
    EXPECT_THROW(net.forward(x, nullptr, 0.5), InputError);
}

TEST(Denoiser, ComposedGradientsMatchFiniteDifferences) {
    Rng rng(14);
    for (int trial = 0; trial < 2; ++trial) {
        Denoiser<double> net(tiny_spec(trial == 0, 1), rng);
        auto params = net.params();
        for (auto* p : params)
            p->fill_normal(rng, 0.3);
        auto x = oracle::random_volume<double>(rng, {4, 4, 4}, 1, 0.4);
        auto cond = x.zeros_like();
        for (auto& v : cond.data())
            v = rng.normal();
        const double ab = 0.37;
        typename Denoiser<double>::Tape tape;
        const auto y = net.forward(x, &cond, ab, &tape);
        const auto r = oracle::random_vector(rng, y.data().size());
        zero_grads(params);
        const auto gx = net.backward(tape, oracle::volume_from(y, r));
        auto loss = [&] { return oracle::project_loss(net.forward(x, &cond, ab), r); };
        EXPECT_LT(oracle::check_gradient(x.data(), gx.data(), loss).max_rel_error, 1e-3);
        for (auto* p : params)
            EXPECT_LT(oracle::check_gradient(p->value, p->grad, loss, 1e-4, 16).max_rel_error, 1e-3) << p->name;
    }
}

TEST(Training, ZeroOutputModelLossIsUnitVariance) {
    Rng rng(15);
    Denoiser<float> net(tiny_spec(false, 0), rng);
    auto x0 = oracle::random_volume<float>(rng, {16, 16, 16}, 1, 0.5);
    Adam<float> opt;
    const double loss = train_step<float>({DiffusionSample{x0, std::nullopt}}, net, make_cosine_schedule(), opt, rng);
    // E[eps^2] = 1 with standard error sqrt(2/n).
    EXPECT_NEAR(loss, 1.0, 4 * std::sqrt(2.0 / double(x0.data().size())));
    EXPECT_TRUE(grads_finite(net.params()));
}

TEST(Training, OverfitsSingleTinySample) {
    Rng rng(16);
    auto spec = tiny_spec(false, 0);
    spec.base_channels = 16;
    spec.emb_dim = 16;
    Denoiser<float> net(spec, rng);
    auto x0 = oracle::random_volume<float>(rng, {4, 4, 4}, 1, 0.5);
    for (auto& v : x0.data())
        v = std::clamp(v, -1.f, 1.f);
    const auto s = make_cosine_schedule(20);
    Adam<float> opt(AdamConfig{1e-3});
    // Four copies of the sample, each drawing its own timestep.
    std::vector<DiffusionSample> batch(4, DiffusionSample{x0, std::nullopt});
    double recent = 0;
    for (int step = 0; step < 2000; ++step) {
        const double l = train_step(batch, net, s, opt, rng);
        if (step >= 1800)
            recent += l / 200.0;
    }
    EXPECT_LT(recent, 0.05);
}

TEST(Training, NonFiniteLossAborts) {
    Rng rng(17);
    Denoiser<float> net(tiny_spec(false, 0), rng);
    auto x0 = oracle::random_volume<float>(rng, {4, 4, 4}, 1, 0.5);
    x0.data()[0] = std::numeric_limits<float>::quiet_NaN();
    Adam<float> opt;
    const auto before = net.params()[0]->value;
    EXPECT_THROW(train_step<float>({DiffusionSample{x0, std::nullopt}}, net, make_cosine_schedule(), opt, rng), NumericalError);
    EXPECT_EQ(net.params()[0]->value, before);
    EXPECT_EQ(opt.steps(), 0);
}
