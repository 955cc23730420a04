// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Sparse UNet noise predictor: conv-in, residual blocks with noise-level conditioning, strided
// down/up paths with skip concatenation, an optional mid-network attention, and GN-SiLU-conv out.
//
#pragma once

#include <dids/diffusion/engine.hpp>
#include <dids/sparse/ops.hpp>

#include <optional>
#include <type_traits>
#include <string>
#include <vector>

namespace dids {

struct DenoiserSpec {
    int in_channels = 1;   // diffused channels (also output channels)
    int cond_channels = 0; // concatenated condition channels
    int base_channels = 16;
    int emb_dim = 16;      // sinusoidal noise-level embedding size
    int levels = 1;        // number of 2x down/up stages
    bool attention = false;
    int heads = 1;
    std::size_t attention_cap = 4096;
    int kernel_size = 3;
    double embedding_scale = 1000.0;
};

/// GN -> SiLU -> conv -> (+ projected embedding) -> GN -> SiLU -> conv, plus a (1x1) skip.
template <typename T>
struct ResBlock {
    GroupNorm<T> gn1, gn2;
    Conv3d<T> conv1, conv2;
    Linear<T> emb_proj;
    bool has_skip = false;
    Conv3d<T> skip;

    struct Tape {
        BasicSparseVolume<T> x, a1, s1, h2, a2, s2;
        std::vector<T> e;
    };

    ResBlock() = default;
    ResBlock(const std::string& name, int cin, int cout, int emb_hidden, int ksize, Rng& rng)
        : gn1(name + ".gn1", cin, GroupNorm<T>::default_groups(cin)), gn2(name + ".gn2", cout, GroupNorm<T>::default_groups(cout)),
          conv1(name + ".conv1", cin, cout, ksize, rng), conv2(name + ".conv2", cout, cout, ksize, rng, 0.5),
          emb_proj(name + ".emb", emb_hidden, cout, rng), has_skip(cin != cout) {
        if (has_skip)
            skip = Conv3d<T>(name + ".skip", cin, cout, 1, rng);
    }

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, const std::vector<T>& e, Tape* tape) const {
        auto a1 = gn1.forward(x);
        auto s1 = silu(a1);
        auto h2 = add_channel_bias(conv1.forward(s1), emb_proj.forward(e));
        auto a2 = gn2.forward(h2);
        auto s2 = silu(a2);
        auto out = add(conv2.forward(s2), has_skip ? skip.forward(x) : x);
        if (tape)
            *tape = Tape{x, std::move(a1), std::move(s1), std::move(h2), std::move(a2), std::move(s2), e};
        return out;
    }

    /// Returns the input gradient; adds the embedding gradient into `ge`.
    BasicSparseVolume<T> backward(const Tape& tp, const BasicSparseVolume<T>& g, std::vector<T>& ge) {
        auto g_s2 = conv2.backward(tp.s2, g);
        auto g_h2 = gn2.backward(tp.h2, silu_backward(tp.a2, g_s2));
        const auto g_e = emb_proj.backward(tp.e, channel_sum(g_h2));
        for (std::size_t i = 0; i < ge.size(); ++i)
            ge[i] += g_e[i];
        auto g_s1 = conv1.backward(tp.s1, g_h2);
        auto gx = gn1.backward(tp.x, silu_backward(tp.a1, g_s1));
        return add(gx, has_skip ? skip.backward(tp.x, g) : g);
    }

    void collect(ParamList<T>& p) {
        gn1.collect(p);
        conv1.collect(p);
        emb_proj.collect(p);
        gn2.collect(p);
        conv2.collect(p);
        if (has_skip)
            skip.collect(p);
    }
};

template <typename T>
class Denoiser {
public:
    struct Tape {
        BasicSparseVolume<T> input;
        std::vector<T> emb_in, e1, e;
        std::vector<typename ResBlock<T>::Tape> enc, dec;
        std::vector<BasicSparseVolume<T>> skips, up_in;
        typename ResBlock<T>::Tape mid1, mid2;
        BasicSparseVolume<T> attn_in, out_gn_in, out_silu_in, out_conv_in;
    };

    Denoiser() = default;
    Denoiser(const DenoiserSpec& spec, Rng& rng) : spec_(spec) {
        const int c = spec.base_channels;
        const int hidden = 4 * spec.emb_dim;
        DIDS_CHECK(spec.levels >= 0, "levels must be non-negative");
        emb1_ = Linear<T>("emb.fc1", spec.emb_dim, hidden, rng);
        emb2_ = Linear<T>("emb.fc2", hidden, hidden, rng);
        conv_in_ = Conv3d<T>("conv_in", spec.in_channels + spec.cond_channels + 1, c, spec.kernel_size, rng);
        for (int l = 0; l < spec.levels; ++l) {
            const std::string n = "level" + std::to_string(l);
            enc_.emplace_back(n + ".enc", c, c, hidden, spec.kernel_size, rng);
            down_.emplace_back(n + ".down", c, c, rng);
            up_.emplace_back(n + ".up", c, c, rng);
            dec_.emplace_back(n + ".dec", 2 * c, c, hidden, spec.kernel_size, rng);
        }
        mid1_ = ResBlock<T>("mid1", c, c, hidden, spec.kernel_size, rng);
        mid2_ = ResBlock<T>("mid2", c, c, hidden, spec.kernel_size, rng);
        if (spec.attention)
            attn_ = SparseAttention<T>("mid.attn", c, spec.heads, rng, spec.attention_cap);
        out_gn_ = GroupNorm<T>("out.gn", c, GroupNorm<T>::default_groups(c));
        conv_out_ = Conv3d<T>("conv_out", c, spec.in_channels, spec.kernel_size, rng);
        conv_out_.weight.fill(T(0));
    }

    const DenoiserSpec& spec() const { return spec_; }

    /// Extents must be divisible by 2^levels.
    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, const BasicSparseVolume<T>* cond, double alpha_bar,
                                 Tape* tape = nullptr) const {
        DIDS_CHECK(x.channels() == spec_.in_channels, "denoiser input channel mismatch");
        DIDS_CHECK(!x.empty(), "denoiser input is empty");
        const auto ones = ones_like_mask<T>(x.mask());
        BasicSparseVolume<T> input;
        if (spec_.cond_channels > 0) {
            DIDS_CHECK(cond != nullptr && cond->channels() == spec_.cond_channels, "denoiser condition channel mismatch");
            input = concat_channels<T>({&x, cond, &ones});
        } else {
            input = concat_channels<T>({&x, &ones});
        }
        const auto ae = alpha_embedding(alpha_bar, spec_.emb_dim, spec_.embedding_scale);
        std::vector<T> emb_in(ae.begin(), ae.end());
        auto e1 = emb1_.forward(emb_in);
        auto e = silu_vec(emb2_.forward(silu_vec(e1)));

        Tape local;
        Tape& tp = tape ? *tape : local;
        const bool keep = tape != nullptr;
        tp.enc.resize(enc_.size());
        tp.dec.resize(dec_.size());
        tp.up_in.clear();

        auto h = conv_in_.forward(input);
        std::vector<BasicSparseVolume<T>> skips;
        for (std::size_t l = 0; l < enc_.size(); ++l) {
            h = enc_[l].forward(h, e, keep ? &tp.enc[l] : nullptr);
            skips.push_back(h);
            h = down_[l].forward(h);
        }
        h = mid1_.forward(h, e, keep ? &tp.mid1 : nullptr);
        if (spec_.attention) {
            if (keep)
                tp.attn_in = h;
            h = attn_.forward(h);
        }
        h = mid2_.forward(h, e, keep ? &tp.mid2 : nullptr);
        for (std::size_t li = enc_.size(); li-- > 0;) {
            if (keep)
                tp.up_in.push_back(h);
            auto u = up_[li].forward(h, skips[li].mask());
            h = dec_[li].forward(concat_channels<T>({&u, &skips[li]}), e, keep ? &tp.dec[li] : nullptr);
        }
        auto a = out_gn_.forward(h);
        auto s = silu(a);
        auto out = conv_out_.forward(s);
        if (keep) {
            tp.input = std::move(input);
            tp.emb_in = std::move(emb_in);
            tp.e1 = std::move(e1);
            tp.e = std::move(e);
            tp.skips = std::move(skips);
            tp.out_gn_in = std::move(h);
            tp.out_silu_in = std::move(a);
            tp.out_conv_in = std::move(s);
        }
        return out;
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the diffused input channels.
    BasicSparseVolume<T> backward(const Tape& tp, const BasicSparseVolume<T>& g_out) {
        const int c = spec_.base_channels;
        std::vector<T> ge(tp.e.size(), T(0));
        auto g = conv_out_.backward(tp.out_conv_in, g_out);
        g = out_gn_.backward(tp.out_gn_in, silu_backward(tp.out_silu_in, g));

        std::vector<BasicSparseVolume<T>> g_skips(enc_.size());
        // up_in is stored in decoding order, deepest level first.
        for (std::size_t li = 0; li < dec_.size(); ++li) {
            const std::size_t order = dec_.size() - 1 - li; // index into up_in
            auto g_cat = dec_[li].backward(tp.dec[li], g, ge);
            g_skips[li] = slice_channels(g_cat, c, c);
            g = up_[li].backward(tp.up_in[order], slice_channels(g_cat, 0, c));
        }
        g = mid2_.backward(tp.mid2, g, ge);
        if (spec_.attention)
            g = attn_.backward(tp.attn_in, g);
        g = mid1_.backward(tp.mid1, g, ge);
        for (std::size_t l = enc_.size(); l-- > 0;) {
            g = down_[l].backward(tp.skips[l], g);
            g = add(g, g_skips[l]);
            g = enc_[l].backward(tp.enc[l], g, ge);
        }
        g = conv_in_.backward(tp.input, g);

        const auto g_e2 = silu_vec_backward(emb2_.forward(silu_vec(tp.e1)), ge);
        const auto g_s1 = emb2_.backward(silu_vec(tp.e1), g_e2);
        emb1_.backward(tp.emb_in, silu_vec_backward(tp.e1, g_s1));
        return slice_channels(g, 0, spec_.in_channels);
    }

    ParamList<T> params() {
        ParamList<T> p;
        emb1_.collect(p);
        emb2_.collect(p);
        conv_in_.collect(p);
        for (std::size_t l = 0; l < enc_.size(); ++l) {
            enc_[l].collect(p);
            down_[l].collect(p);
            up_[l].collect(p);
            dec_[l].collect(p);
        }
        mid1_.collect(p);
        if (spec_.attention)
            attn_.collect(p);
        mid2_.collect(p);
        out_gn_.collect(p);
        conv_out_.collect(p);
        return p;
    }

    /// Adapter for the samplers (float precision only).
    EpsPredictor predictor() const {
        return [this](const SparseVolume& x, const SparseVolume* cond, double ab) {
            if constexpr (std::is_same_v<T, float>) {
                return forward(x, cond, ab);
            } else {
                auto xd = x.cast<T>();
                std::optional<BasicSparseVolume<T>> cd;
                if (cond)
                    cd = cond->cast<T>();
                return forward(xd, cd ? &*cd : nullptr, ab).template cast<float>();
            }
        };
    }

private:
    DenoiserSpec spec_;
    Linear<T> emb1_, emb2_;
    Conv3d<T> conv_in_;
    std::vector<ResBlock<T>> enc_, dec_;
    std::vector<Downsample<T>> down_;
    std::vector<Upsample<T>> up_;
    ResBlock<T> mid1_, mid2_;
    SparseAttention<T> attn_;
    GroupNorm<T> out_gn_;
    Conv3d<T> conv_out_;
};

} // namespace dids
