// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/common.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace dids {

/// Variance schedule indexed by timestep t in [1, T]; alpha_bar(0) is defined as 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> betas, std::string kind = "custom") : kind_(std::move(kind)), beta_(std::move(betas)) {
        DIDS_CHECK(!beta_.empty(), "noise schedule needs at least one step");
        alpha_bar_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            DIDS_CHECK(beta_[i] > 0.0 && beta_[i] < 1.0, "beta must lie in (0, 1)");
            prod *= 1.0 - beta_[i];
            alpha_bar_[i] = prod;
        }
    }

    int steps() const { return int(beta_.size()); }
    const std::string& kind() const { return kind_; }

    double beta(int t) const { return beta_.at(index(t)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const {
        if (t == 0)
            return 1.0;
        return alpha_bar_.at(index(t));
    }
    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    std::size_t index(int t) const {
        if (t < 1 || t > steps())
            throw InputError("timestep out of range: " + std::to_string(t));
        return std::size_t(t - 1);
    }

    std::string kind_;
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

/// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
inline NoiseSchedule make_linear_schedule(int steps = 2000, double beta_start = 1e-6, double beta_end = 0.01) {
    DIDS_CHECK(steps >= 1, "schedule needs at least one step");
    DIDS_CHECK(beta_start > 0 && beta_start <= beta_end && beta_end < 1, "linear schedule needs 0 < start <= end < 1");
    std::vector<double> b(steps);
    for (int i = 0; i < steps; ++i)
        b[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
    return NoiseSchedule(std::move(b), "linear");
}

/// Squared-cosine profile: alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
/// with betas clipped to `max_beta`.
inline NoiseSchedule make_cosine_schedule(int steps = 2000, double s = 0.008, double max_beta = 0.999) {
    DIDS_CHECK(steps >= 1, "schedule needs at least one step");
    auto f = [&](double t) {
        const double c = std::cos((t / steps + s) / (1 + s) * std::numbers::pi / 2);
        return c * c;
    };
    std::vector<double> b(steps);
    for (int t = 1; t <= steps; ++t)
        b[t - 1] = std::min(1.0 - f(t) / f(t - 1), max_beta);
    return NoiseSchedule(std::move(b), "cosine");
}

/// Pairs (t, t_prev) of a uniformly strided sampling trajectory ending at t_prev = 0.
inline std::vector<std::pair<int, int>> strided_timesteps(const NoiseSchedule& sched, int sample_steps) {
    std::vector<std::pair<int, int>> out;
    if (sample_steps <= 0)
        return out;
    const int total = sched.steps();
    sample_steps = std::min(sample_steps, total);
    std::vector<int> ts;
    for (int i = 0; i < sample_steps; ++i)
        ts.push_back(int(std::lround(double(total) * double(sample_steps - i) / double(sample_steps))));
    ts.push_back(0);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i)
        out.emplace_back(ts[i], ts[i + 1]);
    return out;
}

} // namespace dids
