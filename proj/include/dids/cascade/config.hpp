// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Flat key/value configuration with [sections]. Lines look like `key = value`; `#` starts a
// comment. Every key a reader does not consume is reported as an error.
//
#pragma once

#include <dids/diffusion/denoiser.hpp>
#include <dids/fusion/refine.hpp>
#include <dids/vq/autoencoder.hpp>

#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace dids {

class ConfigFile {
public:
    ConfigFile() = default;

    static ConfigFile parse(std::istream& is, const std::string& origin = "config") {
        ConfigFile cfg;
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos)
                line.erase(hash);
            line = trim(line);
            if (line.empty())
                continue;
            const std::string where = origin + ":" + std::to_string(lineno);
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw InputError(where + ": unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw InputError(where + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            if (key.empty())
                throw InputError(where + ": empty key");
            cfg.values_[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream is(path);
        if (!is)
            throw InputError("cannot open config: " + path);
        return parse(is, path);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    template <typename T>
    void read(const std::string& key, T& out) const {
        const auto it = values_.find(key);
        if (it == values_.end())
            return;
        used_.insert(key);
        out = convert<T>(key, it->second);
    }

    /// Keys that were present but never read.
    std::vector<std::string> unused() const {
        std::vector<std::string> u;
        for (const auto& [k, v] : values_)
            if (!used_.count(k))
                u.push_back(k);
        return u;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos)
            return {};
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    template <typename T>
    static T convert(const std::string& key, const std::string& text) {
        std::istringstream is(text);
        T v{};
        if constexpr (std::is_same_v<T, bool>) {
            if (text == "true" || text == "1")
                return true;
            if (text == "false" || text == "0")
                return false;
            throw InputError("config " + key + ": expected true or false, got '" + text + "'");
        } else if constexpr (std::is_same_v<T, std::string>) {
            return text;
        } else if constexpr (std::is_same_v<T, GridExtent>) {
            if (!(is >> v.h >> v.w >> v.l) || !v.valid())
                throw InputError("config " + key + ": expected three positive integers, got '" + text + "'");
        } else {
            if (!(is >> v))
                throw InputError("config " + key + ": cannot parse '" + text + "'");
        }
        std::string rest;
        if (is >> rest)
            throw InputError("config " + key + ": trailing characters in '" + text + "'");
        return v;
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

struct ScheduleSpec {
    std::string kind = "linear";
    int steps = 2000;
    double beta_start = 1e-6;
    double beta_end = 0.01;

    NoiseSchedule make() const {
        if (kind == "linear")
            return make_linear_schedule(steps, beta_start, beta_end);
        if (kind == "cosine")
            return make_cosine_schedule(steps);
        throw InputError("unknown noise schedule: " + kind);
    }
};

struct StageConfig {
    DenoiserSpec denoiser;
    ScheduleSpec schedule;
    SamplerOptions sampler{SamplerKind::Ddim, 200, std::nullopt};
    AdamConfig adam;
};

struct TrainConfig {
    long iterations = 1000;
    int batch = 1;
    int log_every = 50;
    long checkpoint_every = 0;
    GridExtent crop{96, 96, 96};
    bool rotate = true;
    double condition_dropout = 0.1; // refinement model only
    double coarse_noise = 0.5;      // refinement model: std of the synthetic coarse-TSDF error
};

/// Every tunable of the pipeline. Channel counts that follow from the latent size are derived by
/// finalize(), not read from the file.
struct CascadeConfig {
    double voxel_size = 0.04;
    double truncation = 0.12;
    GridExtent cap{512, 512, 128};
    double mask_threshold = 0.5;
    double min_occupancy = 0.001;
    bool snap_latents = true;
    GridExtent crop{96, 96, 96};
    int overlap = 32;
    FusionMode fusion = FusionMode::Stochastic;
    int threads = 1;
    VqSpec vq;
    AdamConfig vq_adam;
    AdamConfig disc_adam;
    std::array<StageConfig, 3> stage;
    StageConfig refine;
    TrainConfig train;

    CascadeConfig() {
        for (auto& st : stage)
            st.schedule.kind = "cosine";
        refine.sampler.steps = 100;
        stage[2].sampler.clip = ClipRange{};
        refine.sampler.clip = ClipRange{};
        finalize();
    }

    void finalize() {
        const int d = vq.latent_dim;
        stage[0].denoiser.in_channels = d;
        stage[0].denoiser.cond_channels = 0;
        stage[1].denoiser.in_channels = d;
        stage[1].denoiser.cond_channels = d;
        stage[2].denoiser.in_channels = 1;
        stage[2].denoiser.cond_channels = 2 * d;
        refine.denoiser.in_channels = 1;
        refine.denoiser.cond_channels = kRefineConditionChannels;
    }

    double tsdf_limit() const { return truncation / voxel_size; }
};

namespace detail {

inline void read_stage(const ConfigFile& f, const std::string& s, StageConfig& st) {
    auto& d = st.denoiser;
    f.read(s + ".base_channels", d.base_channels);
    f.read(s + ".emb_dim", d.emb_dim);
    f.read(s + ".levels", d.levels);
    f.read(s + ".attention", d.attention);
    f.read(s + ".heads", d.heads);
    f.read(s + ".attention_cap", d.attention_cap);
    f.read(s + ".kernel_size", d.kernel_size);
    f.read(s + ".embedding_scale", d.embedding_scale);
    f.read(s + ".schedule", st.schedule.kind);
    f.read(s + ".timesteps", st.schedule.steps);
    f.read(s + ".beta_start", st.schedule.beta_start);
    f.read(s + ".beta_end", st.schedule.beta_end);
    f.read(s + ".sample_steps", st.sampler.steps);
    std::string sampler = st.sampler.kind == SamplerKind::Ddim ? "ddim" : "ddpm";
    f.read(s + ".sampler", sampler);
    if (sampler != "ddim" && sampler != "ddpm")
        throw InputError("config " + s + ".sampler: expected ddim or ddpm");
    st.sampler.kind = sampler == "ddim" ? SamplerKind::Ddim : SamplerKind::Ddpm;
    bool clip = st.sampler.clip.has_value();
    f.read(s + ".clip", clip);
    st.sampler.clip = clip ? std::optional<ClipRange>(ClipRange{}) : std::nullopt;
    f.read(s + ".lr", st.adam.lr);
}

} // namespace detail

/// Builds a configuration from defaults overridden by `f`; unknown keys are an error.
inline CascadeConfig cascade_config(const ConfigFile& f) {
    CascadeConfig c;
    f.read("scene.voxel_size", c.voxel_size);
    f.read("scene.truncation", c.truncation);
    f.read("scene.cap", c.cap);
    f.read("scene.mask_threshold", c.mask_threshold);
    f.read("scene.min_occupancy", c.min_occupancy);
    f.read("scene.snap_latents", c.snap_latents);
    f.read("fusion.crop", c.crop);
    f.read("fusion.overlap", c.overlap);
    std::string mode = to_string(c.fusion);
    f.read("fusion.mode", mode);
    c.fusion = parse_fusion_mode(mode);
    f.read("fusion.threads", c.threads);

    auto& v = c.vq;
    f.read("vq.channels", v.channels);
    f.read("vq.fine_channels", v.fine_channels);
    f.read("vq.codebook_size", v.codebook_size);
    f.read("vq.latent_dim", v.latent_dim);
    std::string q = v.quantizer == QuantizerKind::Nearest ? "nearest" : "gumbel";
    f.read("vq.quantizer", q);
    if (q != "nearest" && q != "gumbel")
        throw InputError("config vq.quantizer: expected nearest or gumbel");
    v.quantizer = q == "nearest" ? QuantizerKind::Nearest : QuantizerKind::Gumbel;
    f.read("vq.codebook_init", v.codebook_init);
    f.read("vq.commitment", v.commitment);
    f.read("vq.gumbel_tau_start", v.gumbel_tau_start);
    f.read("vq.gumbel_tau_end", v.gumbel_tau_end);
    f.read("vq.gumbel_anneal_steps", v.gumbel_anneal_steps);
    f.read("vq.gumbel_kl_weight", v.gumbel_kl_weight);
    f.read("vq.lambda1", v.lambda1);
    f.read("vq.lambda2", v.lambda2);
    f.read("vq.adaptive_lambda2", v.adaptive_lambda2);
    f.read("vq.use_gan", v.use_gan);
    f.read("vq.disc_start", v.disc_start);
    f.read("vq.disc_channels", v.disc_channels);
    f.read("vq.lr", c.vq_adam.lr);
    f.read("vq.disc_lr", c.disc_adam.lr);
    v.mask_threshold = c.mask_threshold;

    for (int s = 0; s < 3; ++s)
        detail::read_stage(f, "stage" + std::to_string(s + 1), c.stage[std::size_t(s)]);
    detail::read_stage(f, "refine", c.refine);

    f.read("train.iterations", c.train.iterations);
    f.read("train.batch", c.train.batch);
    f.read("train.log_every", c.train.log_every);
    f.read("train.checkpoint_every", c.train.checkpoint_every);
    f.read("train.crop", c.train.crop);
    f.read("train.rotate", c.train.rotate);
    f.read("train.condition_dropout", c.train.condition_dropout);
    f.read("train.coarse_noise", c.train.coarse_noise);

    if (const auto u = f.unused(); !u.empty())
        throw InputError("unknown config key: " + u.front());
    DIDS_CHECK(c.voxel_size > 0 && c.truncation > 0, "voxel size and truncation must be positive");
    DIDS_CHECK(c.mask_threshold > 0 && c.mask_threshold < 1, "mask threshold must lie in (0, 1)");
    DIDS_CHECK(c.threads >= 1 && c.train.batch >= 1, "threads and batch must be positive");
    c.finalize();
    return c;
}

inline CascadeConfig load_cascade_config(const std::string& path) { return cascade_config(ConfigFile::load(path)); }

} // namespace dids
