// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/common.hpp>

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace dids {

/// Trainable tensor with a gradient accumulator of the same shape.
template <typename T>
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;

    Param() = default;
    Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
        const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                                                  [](std::size_t a, int b) { return a * std::size_t(b); });
        value.assign(count, T(0));
        grad.assign(count, T(0));
    }

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

    void fill_normal(Rng& rng, double stddev) {
        for (auto& v : value)
            v = T(rng.normal() * stddev);
    }
    void fill(T v) { std::fill(value.begin(), value.end(), v); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
    for (auto* p : params)
        p->zero_grad();
}

template <typename T>
bool grads_finite(const ParamList<T>& params) {
    for (auto* p : params)
        for (T g : p->grad)
            if (!std::isfinite(double(g)))
                return false;
    return true;
}

template <typename T>
double grad_norm(const ParamList<T>& params) {
    double s = 0;
    for (auto* p : params)
        for (T g : p->grad)
            s += double(g) * double(g);
    return std::sqrt(s);
}

/// Copy values between two parameter lists of identical layout (possibly different precision).
template <typename T, typename U>
void copy_values(const ParamList<T>& from, const ParamList<U>& to) {
    DIDS_CHECK(from.size() == to.size(), "parameter list layout mismatch");
    for (std::size_t i = 0; i < from.size(); ++i) {
        DIDS_CHECK(from[i]->size() == to[i]->size(), "parameter shape mismatch: " + from[i]->name);
        for (std::size_t k = 0; k < from[i]->size(); ++k)
            to[i]->value[k] = U(from[i]->value[k]);
    }
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers follow the order of the parameter list.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const ParamList<T>& params) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        DIDS_CHECK(m_.size() == params.size(), "optimizer bound to a different parameter list");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double g = double(p.grad[k]);
                m_[i][k] = cfg_.beta1 * m_[i][k] + (1 - cfg_.beta1) * g;
                v_[i][k] = cfg_.beta2 * v_[i][k] + (1 - cfg_.beta2) * g * g;
                const double mh = m_[i][k] / bc1;
                const double vh = v_[i][k] / bc2;
                p.value[k] = T(double(p.value[k]) - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    long steps() const { return t_; }
    void set_steps(long t) { t_ = t; }
    AdamConfig& config() { return cfg_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace dids
