// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace dids {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed arguments, files or shapes supplied by the caller.
class InputError : public Error {
public:
    using Error::Error;
};

/// A cascade stage produced an occupancy layout too small to continue from.
class DegenerateLayout : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered in a loss, gradient or sampled volume.
class NumericalError : public Error {
public:
    using Error::Error;
};

#define DIDS_CHECK(cond, msg)                                                                     \
    do {                                                                                          \
        if (!(cond))                                                                              \
            throw ::dids::InputError(std::string(msg));                                          \
    } while (0)

/// Seedable sequential random stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    std::uint64_t next() { return engine_(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

    /// Child stream whose sequence depends only on this stream's seed path and `salt`.
    Rng fork(std::uint64_t salt) { return Rng(mix(next() ^ mix(salt))); }

    std::mt19937_64& engine() { return engine_; }

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::mt19937_64 engine_;
};

/// Stateless random numbers keyed by (seed, a, b, c). The value for a key does not depend on the
/// order in which keys are queried, so results are independent of thread scheduling.
struct CounterRng {
    std::uint64_t seed = 0;

    std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        std::uint64_t h = Rng::mix(seed ^ 0x243f6a8885a308d3ULL);
        h = Rng::mix(h ^ a);
        h = Rng::mix(h ^ (b * 0x9e3779b97f4a7c15ULL));
        h = Rng::mix(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
        return h;
    }

    /// Uniform in [0, 1).
    double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return static_cast<double>(bits(a, b, c) >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). Bias is below 2^-32 for n < 2^32.
    std::uint64_t below(std::uint64_t n, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return static_cast<std::uint64_t>(uniform(a, b, c) * static_cast<double>(n)) % n;
    }

    /// Standard normal via Box-Muller on two decorrelated uniforms.
    double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        const double u1 = 1.0 - uniform(a, b, 2 * c);
        const double u2 = uniform(a, b, 2 * c + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
};

} // namespace dids
