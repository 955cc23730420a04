// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/diffusion/denoiser.hpp>
#include <dids/sparse/param.hpp>

#include <vector>

namespace dids {

/// Draws one training example (t, eps, x_t) for a sample.
template <typename T>
struct NoisedExample {
    int t = 0;
    BasicSparseVolume<T> noise;
    BasicSparseVolume<T> xt;
};

template <typename T>
NoisedExample<T> make_noised_example(const BasicSparseVolume<T>& x0, const NoiseSchedule& sched, Rng& rng) {
    NoisedExample<T> ex;
    ex.t = 1 + int(rng.below(std::uint64_t(sched.steps())));
    ex.noise = x0.zeros_like();
    for (auto& v : ex.noise.data())
        v = T(rng.normal());
    ex.xt = q_sample(x0, ex.t, ex.noise, sched);
    return ex;
}

/// One optimizer step on the mean masked noise-prediction loss over `batch`. Throws
/// NumericalError (without touching the parameters) when the loss or a gradient is not finite.
template <typename T>
double train_step(const std::vector<DiffusionSample>& batch, Denoiser<T>& model, const NoiseSchedule& sched, Adam<T>& opt,
                  Rng& rng) {
    DIDS_CHECK(!batch.empty(), "empty training batch");
    auto params = model.params();
    zero_grads(params);
    double total = 0;
    for (const auto& s : batch) {
        const auto x0 = s.volume.template cast<T>();
        std::optional<BasicSparseVolume<T>> cond;
        if (s.condition)
            cond = s.condition->template cast<T>();
        const auto ex = make_noised_example(x0, sched, rng);
        typename Denoiser<T>::Tape tape;
        const auto pred = model.forward(ex.xt, cond ? &*cond : nullptr, sched.alpha_bar(ex.t), &tape);
        auto loss = masked_mse_loss(ex.noise, pred);
        total += loss.value;
        model.backward(tape, scaled(loss.grad, 1.0 / double(batch.size())));
    }
    const double mean = total / double(batch.size());
    if (!std::isfinite(mean) || !grads_finite(params))
        throw NumericalError("non-finite loss or gradient in diffusion training step");
    opt.step(params);
    return mean;
}

} // namespace dids
