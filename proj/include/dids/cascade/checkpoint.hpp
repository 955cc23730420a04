// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// DIDS1 checkpoints. Layout (little-endian):
//   "DIDS1" | string kind | u32 n_meta, (string key, string value)* | i64 step |
//   u32 n_params, (string name, u32 rank, i32 dims[rank], f32 values)* |
//   u32 n_optimizers, (string name, i64 t, u32 n, (u32 size, f64 m[size], f64 v[size])*)*
// Strings are u32 length + bytes.
//
#pragma once

#include <dids/binary_io.hpp>
#include <dids/diffusion/denoiser.hpp>
#include <dids/vq/autoencoder.hpp>

#include <map>
#include <string>
#include <vector>

namespace dids {

struct StoredParam {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

struct StoredOptimizer {
    std::string name;
    long t = 0;
    std::vector<std::vector<double>> m, v;
};

struct Checkpoint {
    std::string kind; // "vq", "stage1", "stage2", "stage3", "refine"
    std::map<std::string, std::string> meta;
    long step = 0;
    std::vector<StoredParam> params;
    std::vector<StoredOptimizer> optimizers;

    void store(const ParamList<float>& list) {
        params.clear();
        for (const auto* p : list)
            params.push_back({p->name, p->shape, p->value});
    }

    /// Copies stored values into `list`; names and shapes must match one to one.
    void restore(const ParamList<float>& list) const {
        if (list.size() != params.size())
            throw InputError("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                             std::to_string(list.size()));
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i]->name != params[i].name || list[i]->shape != params[i].shape)
                throw InputError("checkpoint parameter mismatch at " + params[i].name);
            list[i]->value = params[i].values;
        }
    }

    void store_optimizer(const std::string& name, Adam<float>& opt) {
        optimizers.push_back({name, opt.steps(), opt.first_moments(), opt.second_moments()});
    }

    /// Restores optimizer state when present; returns false otherwise.
    bool restore_optimizer(const std::string& name, Adam<float>& opt) const {
        for (const auto& o : optimizers)
            if (o.name == name) {
                opt.set_steps(o.t);
                opt.first_moments() = o.m;
                opt.second_moments() = o.v;
                return true;
            }
        return false;
    }

    const std::string& get(const std::string& key) const {
        const auto it = meta.find(key);
        if (it == meta.end())
            throw InputError("checkpoint lacks metadata key " + key);
        return it->second;
    }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
    io::put_magic(os, "DIDS1");
    io::put_string(os, c.kind);
    io::put<std::uint32_t>(os, std::uint32_t(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        io::put_string(os, k);
        io::put_string(os, v);
    }
    io::put<std::int64_t>(os, c.step);
    io::put<std::uint32_t>(os, std::uint32_t(c.params.size()));
    for (const auto& p : c.params) {
        io::put_string(os, p.name);
        io::put<std::uint32_t>(os, std::uint32_t(p.shape.size()));
        for (int d : p.shape)
            io::put<std::int32_t>(os, d);
        for (float v : p.values)
            io::put<float>(os, v);
    }
    io::put<std::uint32_t>(os, std::uint32_t(c.optimizers.size()));
    for (const auto& o : c.optimizers) {
        io::put_string(os, o.name);
        io::put<std::int64_t>(os, o.t);
        io::put<std::uint32_t>(os, std::uint32_t(o.m.size()));
        for (std::size_t i = 0; i < o.m.size(); ++i) {
            io::put<std::uint32_t>(os, std::uint32_t(o.m[i].size()));
            for (double x : o.m[i])
                io::put<double>(os, x);
            for (double x : o.v[i])
                io::put<double>(os, x);
        }
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    io::expect_magic(is, "DIDS1");
    Checkpoint c;
    c.kind = io::get_string(is);
    const auto nm = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nm; ++i) {
        auto k = io::get_string(is);
        c.meta[k] = io::get_string(is);
    }
    c.step = long(io::get<std::int64_t>(is));
    const auto np = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < np; ++i) {
        StoredParam p;
        p.name = io::get_string(is);
        const auto rank = io::get<std::uint32_t>(is);
        if (rank > 8)
            throw InputError("checkpoint parameter rank out of range");
        std::size_t count = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const int d = io::get<std::int32_t>(is);
            if (d < 0 || d > (1 << 24))
                throw InputError("checkpoint parameter shape out of range");
            p.shape.push_back(d);
            count *= std::size_t(d);
        }
        if (count > (std::size_t(1) << 28))
            throw InputError("checkpoint parameter too large");
        p.values.resize(count);
        for (auto& v : p.values)
            v = io::get<float>(is);
        c.params.push_back(std::move(p));
    }
    const auto no = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < no; ++i) {
        StoredOptimizer o;
        o.name = io::get_string(is);
        o.t = long(io::get<std::int64_t>(is));
        const auto n = io::get<std::uint32_t>(is);
        if (n > np)
            throw InputError("checkpoint optimizer state does not match its parameters");
        o.m.resize(n);
        o.v.resize(n);
        for (std::uint32_t k = 0; k < n; ++k) {
            const auto size = io::get<std::uint32_t>(is);
            if (size > (1u << 28))
                throw InputError("checkpoint optimizer state too large");
            o.m[k].resize(size);
            o.v[k].resize(size);
            for (auto& x : o.m[k])
                x = io::get<double>(is);
            for (auto& x : o.v[k])
                x = io::get<double>(is);
        }
        c.optimizers.push_back(std::move(o));
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    auto os = io::open_out(path);
    write_checkpoint(os, c);
    if (!os)
        throw InputError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto is = io::open_in(path);
    return read_checkpoint(is);
}

// ---- model specs as metadata ----

inline std::map<std::string, std::string> to_meta(const DenoiserSpec& s) {
    return {{"in_channels", std::to_string(s.in_channels)},
            {"cond_channels", std::to_string(s.cond_channels)},
            {"base_channels", std::to_string(s.base_channels)},
            {"emb_dim", std::to_string(s.emb_dim)},
            {"levels", std::to_string(s.levels)},
            {"attention", std::to_string(int(s.attention))},
            {"heads", std::to_string(s.heads)},
            {"attention_cap", std::to_string(s.attention_cap)},
            {"kernel_size", std::to_string(s.kernel_size)},
            {"embedding_scale", std::to_string(s.embedding_scale)}};
}

inline DenoiserSpec denoiser_spec_from_meta(const Checkpoint& c) {
    DenoiserSpec s;
    s.in_channels = std::stoi(c.get("in_channels"));
    s.cond_channels = std::stoi(c.get("cond_channels"));
    s.base_channels = std::stoi(c.get("base_channels"));
    s.emb_dim = std::stoi(c.get("emb_dim"));
    s.levels = std::stoi(c.get("levels"));
    s.attention = std::stoi(c.get("attention")) != 0;
    s.heads = std::stoi(c.get("heads"));
    s.attention_cap = std::size_t(std::stoull(c.get("attention_cap")));
    s.kernel_size = std::stoi(c.get("kernel_size"));
    s.embedding_scale = std::stod(c.get("embedding_scale"));
    return s;
}

inline std::map<std::string, std::string> to_meta(const VqSpec& s) {
    return {{"channels", std::to_string(s.channels)},
            {"fine_channels", std::to_string(s.fine_channels)},
            {"codebook_size", std::to_string(s.codebook_size)},
            {"latent_dim", std::to_string(s.latent_dim)},
            {"quantizer", s.quantizer == QuantizerKind::Nearest ? "nearest" : "gumbel"},
            {"disc_channels", std::to_string(s.disc_channels)},
            {"mask_threshold", std::to_string(s.mask_threshold)}};
}

/// Architecture fields from the checkpoint; training weights keep the values of `base`.
inline VqSpec vq_spec_from_meta(const Checkpoint& c, VqSpec base = {}) {
    base.channels = std::stoi(c.get("channels"));
    base.fine_channels = std::stoi(c.get("fine_channels"));
    base.codebook_size = std::stoi(c.get("codebook_size"));
    base.latent_dim = std::stoi(c.get("latent_dim"));
    base.quantizer = c.get("quantizer") == "gumbel" ? QuantizerKind::Gumbel : QuantizerKind::Nearest;
    base.disc_channels = std::stoi(c.get("disc_channels"));
    return base;
}

/// Checkpoint of a denoiser (weights, spec and optional optimizer state).
inline Checkpoint denoiser_checkpoint(const std::string& kind, Denoiser<float>& model, long step, Adam<float>* opt = nullptr) {
    Checkpoint c;
    c.kind = kind;
    c.meta = to_meta(model.spec());
    c.step = step;
    c.store(model.params());
    if (opt)
        c.store_optimizer("adam", *opt);
    return c;
}

inline Denoiser<float> denoiser_from_checkpoint(const Checkpoint& c) {
    Rng rng(0);
    Denoiser<float> model(denoiser_spec_from_meta(c), rng);
    c.restore(model.params());
    return model;
}

inline Checkpoint vq_checkpoint(OccupancyAutoencoder<float>& model, long step, Adam<float>* opt = nullptr,
                                Adam<float>* opt_disc = nullptr) {
    Checkpoint c;
    c.kind = "vq";
    c.meta = to_meta(model.spec());
    c.step = step;
    c.store(model.params());
    if (opt)
        c.store_optimizer("adam", *opt);
    if (opt_disc)
        c.store_optimizer("adam_disc", *opt_disc);
    return c;
}

inline OccupancyAutoencoder<float> vq_from_checkpoint(const Checkpoint& c, const VqSpec& base = {}) {
    if (c.kind != "vq")
        throw InputError("expected a vq checkpoint, got " + c.kind);
    Rng rng(0);
    OccupancyAutoencoder<float> model(vq_spec_from_meta(c, base), rng);
    c.restore(model.params());
    return model;
}

} // namespace dids
