// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Two-level occupancy autoencoder. The encoder maps a TSDF crop to latents at 4x (z2) and 8x (z1)
// stride. G1 predicts which children of the z1 voxels are occupied at z2 resolution; G2 predicts
// full-resolution occupancy and TSDF from both latents. Training combines BCE on both masks, L1
// on the TSDF, the codebook term and a hinge patch-GAN term with an adaptive weight.
//
#pragma once

#include <dids/vq/codebook.hpp>

#include <optional>
#include <vector>

namespace dids {

enum class QuantizerKind { Nearest, Gumbel };

struct VqSpec {
    int channels = 16;      // encoder and coarse decoder width
    int fine_channels = 8;  // G2 width at full resolution
    int codebook_size = 8192;
    int latent_dim = 4;
    QuantizerKind quantizer = QuantizerKind::Nearest;
    double codebook_init = 1.0;
    double commitment = 0.25;
    double gumbel_tau_start = 1.0;
    double gumbel_tau_end = 0.1;
    long gumbel_anneal_steps = 10000;
    double gumbel_kl_weight = 5e-4;
    double lambda1 = 1.0;
    double lambda2 = 0.2;
    bool adaptive_lambda2 = true;
    bool use_gan = true;
    long disc_start = 0;
    int disc_channels = 8;
    double mask_threshold = 0.5;
    double tsdf_fill = 3.0; // normalized TSDF of inactive voxels in dense views

    static constexpr int kStride1 = 8;
    static constexpr int kStride2 = 4;
};

/// x + conv(silu(gn(x))).
template <typename T>
struct ResidualConv {
    GroupNorm<T> gn;
    Conv3d<T> conv;

    struct Tape {
        BasicSparseVolume<T> x, a, s;
    };

    ResidualConv() = default;
    ResidualConv(const std::string& name, int c, Rng& rng)
        : gn(name + ".gn", c, GroupNorm<T>::default_groups(c)), conv(name + ".conv", c, c, 3, rng, 0.5) {}

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, Tape* tp) const {
        auto a = gn.forward(x);
        auto s = silu(a);
        auto y = add(x, conv.forward(s));
        if (tp)
            *tp = Tape{x, std::move(a), std::move(s)};
        return y;
    }

    BasicSparseVolume<T> backward(const Tape& tp, const BasicSparseVolume<T>& g) {
        auto gs = conv.backward(tp.s, g);
        return add(g, gn.backward(tp.x, silu_backward(tp.a, gs)));
    }

    void collect(ParamList<T>& p) {
        gn.collect(p);
        conv.collect(p);
    }
};

/// GN -> SiLU -> 1x1 conv.
template <typename T>
struct OutputHead {
    GroupNorm<T> gn;
    Conv3d<T> conv;

    struct Tape {
        BasicSparseVolume<T> x, a, s;
    };

    OutputHead() = default;
    OutputHead(const std::string& name, int cin, int cout, Rng& rng)
        : gn(name + ".gn", cin, GroupNorm<T>::default_groups(cin)), conv(name + ".conv", cin, cout, 1, rng) {}

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, Tape* tp) const {
        auto a = gn.forward(x);
        auto s = silu(a);
        auto y = conv.forward(s);
        if (tp)
            *tp = Tape{x, std::move(a), std::move(s)};
        return y;
    }

    BasicSparseVolume<T> backward(const Tape& tp, const BasicSparseVolume<T>& g) {
        return gn.backward(tp.x, silu_backward(tp.a, conv.backward(tp.s, g)));
    }

    void collect(ParamList<T>& p) {
        gn.collect(p);
        conv.collect(p);
    }
};

template <typename T>
class VqEncoder {
public:
    struct Tape {
        BasicSparseVolume<T> x, d1_in, d2_in, d3_in;
        typename ResidualConv<T>::Tape b0, b1, b2, b3;
        typename OutputHead<T>::Tape h1, h2;
    };
    struct Output {
        BasicSparseVolume<T> z1, z2; // pre-quantization (d channels, or K logits for Gumbel)
    };

    VqEncoder() = default;
    VqEncoder(int channels, int out_channels, Rng& rng)
        : out_(out_channels), conv_in_("enc.conv_in", 1, channels, 3, rng), b0_("enc.b0", channels, rng),
          down1_("enc.down1", channels, channels, rng), b1_("enc.b1", channels, rng),
          down2_("enc.down2", channels, channels, rng), b2_("enc.b2", channels, rng),
          head2_("enc.head2", channels, out_channels, rng), down3_("enc.down3", channels, channels, rng),
          b3_("enc.b3", channels, rng), head1_("enc.head1", channels, out_channels, rng) {}

    Output forward(const BasicSparseVolume<T>& x, Tape* tp = nullptr) const {
        DIDS_CHECK(x.channels() == 1, "encoder expects a single TSDF channel");
        DIDS_CHECK(x.extent().divisible_by(VqSpec::kStride1), "crop extent must be divisible by 8");
        if (x.empty()) {
            const OccupancyMask m1(x.extent().coarsened(VqSpec::kStride1), {});
            const OccupancyMask m2(x.extent().coarsened(VqSpec::kStride2), {});
            return {BasicSparseVolume<T>(m1, out_), BasicSparseVolume<T>(m2, out_)};
        }
        Tape local;
        Tape& t = tp ? *tp : local;
        t.x = x;
        auto h = b0_.forward(conv_in_.forward(x), &t.b0);
        t.d1_in = h;
        h = b1_.forward(down1_.forward(h), &t.b1);
        t.d2_in = h;
        h = b2_.forward(down2_.forward(h), &t.b2);
        auto z2 = head2_.forward(h, &t.h2);
        t.d3_in = h;
        h = b3_.forward(down3_.forward(h), &t.b3);
        auto z1 = head1_.forward(h, &t.h1);
        return {std::move(z1), std::move(z2)};
    }

    void backward(const Tape& t, const BasicSparseVolume<T>& g1, const BasicSparseVolume<T>& g2) {
        if (t.x.empty())
            return;
        auto g = head1_.backward(t.h1, g1);
        g = down3_.backward(t.d3_in, b3_.backward(t.b3, g));
        g = add(g, head2_.backward(t.h2, g2));
        g = down2_.backward(t.d2_in, b2_.backward(t.b2, g));
        g = down1_.backward(t.d1_in, b1_.backward(t.b1, g));
        conv_in_.backward(t.x, b0_.backward(t.b0, g));
    }

    void collect(ParamList<T>& p) {
        conv_in_.collect(p);
        b0_.collect(p);
        down1_.collect(p);
        b1_.collect(p);
        down2_.collect(p);
        b2_.collect(p);
        head2_.collect(p);
        down3_.collect(p);
        b3_.collect(p);
        head1_.collect(p);
    }

private:
    int out_ = 4;
    Conv3d<T> conv_in_;
    ResidualConv<T> b0_;
    Downsample<T> down1_;
    ResidualConv<T> b1_;
    Downsample<T> down2_;
    ResidualConv<T> b2_;
    OutputHead<T> head2_;
    Downsample<T> down3_;
    ResidualConv<T> b3_;
    OutputHead<T> head1_;
};

/// G1: occupancy logits for all children of the z1 voxels at z2 resolution.
template <typename T>
class MaskDecoder1 {
public:
    struct Tape {
        BasicSparseVolume<T> z, up_in;
        typename ResidualConv<T>::Tape b0, b1;
        typename OutputHead<T>::Tape head;
    };

    MaskDecoder1() = default;
    MaskDecoder1(int latent_dim, int channels, Rng& rng)
        : conv_in_("g1.conv_in", latent_dim, channels, 3, rng), b0_("g1.b0", channels, rng),
          up_("g1.up", channels, channels, rng), b1_("g1.b1", channels, rng), head_("g1.head", channels, 1, rng) {}

    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& z1, Tape* tp = nullptr) const {
        const auto target = z1.mask().children(2);
        if (z1.empty())
            return BasicSparseVolume<T>(target, 1);
        Tape local;
        Tape& t = tp ? *tp : local;
        t.z = z1;
        auto h = b0_.forward(conv_in_.forward(z1), &t.b0);
        t.up_in = h;
        h = b1_.forward(up_.forward(h, target), &t.b1);
        return head_.forward(h, &t.head);
    }

    BasicSparseVolume<T> backward(const Tape& t, const BasicSparseVolume<T>& g_logits) {
        if (t.z.empty())
            return t.z;
        auto g = b1_.backward(t.b1, head_.backward(t.head, g_logits));
        g = b0_.backward(t.b0, up_.backward(t.up_in, g));
        return conv_in_.backward(t.z, g);
    }

    void collect(ParamList<T>& p) {
        conv_in_.collect(p);
        b0_.collect(p);
        up_.collect(p);
        b1_.collect(p);
        head_.collect(p);
    }

private:
    Conv3d<T> conv_in_;
    ResidualConv<T> b0_;
    Upsample<T> up_;
    ResidualConv<T> b1_;
    OutputHead<T> head_;
};

/// G2: full-resolution occupancy logits and TSDF for all 4x descendants of the z2 voxels.
template <typename T>
class MaskDecoder2 {
public:
    struct Output {
        BasicSparseVolume<T> logits; // 1 channel on children(M_z2, 4)
        BasicSparseVolume<T> tsdf;   // 1 channel, same mask
    };
    struct Tape {
        BasicSparseVolume<T> z1, input, up1_in, up2_in;
        typename ResidualConv<T>::Tape b0, b1, b2;
        typename OutputHead<T>::Tape occ, tsdf;
    };

    MaskDecoder2() = default;
    MaskDecoder2(int latent_dim, int channels, int fine, Rng& rng)
        : conv_in_("g2.conv_in", 2 * latent_dim, channels, 3, rng), b0_("g2.b0", channels, rng),
          up1_("g2.up1", channels, channels, rng), b1_("g2.b1", channels, rng), up2_("g2.up2", channels, fine, rng),
          b2_("g2.b2", fine, rng), occ_("g2.occ", fine, 1, rng), tsdf_("g2.tsdf", fine, 1, rng) {}

    Output forward(const BasicSparseVolume<T>& z1, const BasicSparseVolume<T>& z2, Tape* tp = nullptr) const {
        DIDS_CHECK(z2.extent() == z1.extent().refined(2), "z2 extent must be twice the z1 extent");
        const auto mid = z2.mask().children(2);
        const auto fine = mid.children(2);
        if (z2.empty())
            return {BasicSparseVolume<T>(fine, 1), BasicSparseVolume<T>(fine, 1)};
        Tape local;
        Tape& t = tp ? *tp : local;
        t.z1 = z1;
        const auto cond = upsample_nearest(z1, z2.mask(), 2);
        t.input = concat_channels<T>({&z2, &cond});
        auto h = b0_.forward(conv_in_.forward(t.input), &t.b0);
        t.up1_in = h;
        h = b1_.forward(up1_.forward(h, mid), &t.b1);
        t.up2_in = h;
        h = b2_.forward(up2_.forward(h, fine), &t.b2);
        return {occ_.forward(h, &t.occ), tsdf_.forward(h, &t.tsdf)};
    }

    /// Returns (g_z1, g_z2).
    std::pair<BasicSparseVolume<T>, BasicSparseVolume<T>> backward(const Tape& t, const BasicSparseVolume<T>& g_logits,
                                                                  const BasicSparseVolume<T>& g_tsdf) {
        if (t.input.empty())
            return {t.z1.zeros_like(), BasicSparseVolume<T>(OccupancyMask(t.z1.extent().refined(2), {}), t.z1.channels())};
        auto g = add(occ_.backward(t.occ, g_logits), tsdf_.backward(t.tsdf, g_tsdf));
        g = up2_.backward(t.up2_in, b2_.backward(t.b2, g));
        g = up1_.backward(t.up1_in, b1_.backward(t.b1, g));
        g = conv_in_.backward(t.input, b0_.backward(t.b0, g));
        const int d = t.z1.channels();
        auto g_z1 = upsample_nearest_backward(t.z1, slice_channels(g, d, d), 2);
        return {std::move(g_z1), slice_channels(g, 0, d)};
    }

    /// The layer closest to the TSDF output, used by the adaptive GAN weight.
    Conv3d<T>& tsdf_last_layer() { return tsdf_.conv; }
    const typename OutputHead<T>::Tape& tsdf_tape(const Tape& t) const { return t.tsdf; }

    void collect(ParamList<T>& p) {
        conv_in_.collect(p);
        b0_.collect(p);
        up1_.collect(p);
        b1_.collect(p);
        up2_.collect(p);
        b2_.collect(p);
        occ_.collect(p);
        tsdf_.collect(p);
    }

private:
    Conv3d<T> conv_in_;
    ResidualConv<T> b0_;
    Upsample<T> up1_;
    ResidualConv<T> b1_;
    Upsample<T> up2_;
    ResidualConv<T> b2_;
    OutputHead<T> occ_, tsdf_;
};

/// Patch discriminator on a dense crop: three stride-2 convolutions and a 3^3 output conv.
template <typename T>
class PatchDiscriminator {
public:
    struct Tape {
        BasicSparseVolume<T> x, a1, a2, a3, s3;
        BasicSparseVolume<T> s1, s2;
    };

    PatchDiscriminator() = default;
    PatchDiscriminator(int c, Rng& rng)
        : d1_("disc.d1", 1, c, rng), d2_("disc.d2", c, 2 * c, rng), d3_("disc.d3", 2 * c, 2 * c, rng),
          out_("disc.out", 2 * c, 1, 3, rng) {}

    /// `x` must live on a full mask with extent divisible by 8.
    BasicSparseVolume<T> forward(const BasicSparseVolume<T>& x, Tape* tp = nullptr) const {
        Tape local;
        Tape& t = tp ? *tp : local;
        t.x = x;
        t.a1 = d1_.forward(x);
        t.s1 = silu(t.a1);
        t.a2 = d2_.forward(t.s1);
        t.s2 = silu(t.a2);
        t.a3 = d3_.forward(t.s2);
        t.s3 = silu(t.a3);
        return out_.forward(t.s3);
    }

    BasicSparseVolume<T> backward(const Tape& t, const BasicSparseVolume<T>& g) {
        auto h = silu_backward(t.a3, out_.backward(t.s3, g));
        h = silu_backward(t.a2, d3_.backward(t.s2, h));
        h = silu_backward(t.a1, d2_.backward(t.s1, h));
        return d1_.backward(t.x, h);
    }

    void collect(ParamList<T>& p) {
        d1_.collect(p);
        d2_.collect(p);
        d3_.collect(p);
        out_.collect(p);
    }

private:
    Downsample<T> d1_, d2_, d3_;
    Conv3d<T> out_;
};

// ---- losses ----

template <typename T>
struct ScalarLoss {
    double value = 0;
    BasicSparseVolume<T> grad;
};

/// Mean binary cross-entropy of logits against membership in `target` (mean over the logit voxels).
template <typename T>
ScalarLoss<T> bce_with_logits(const BasicSparseVolume<T>& logits, const OccupancyMask& target) {
    ScalarLoss<T> res{0.0, logits.zeros_like()};
    if (logits.empty())
        return res;
    const double n = double(logits.size());
    const auto& coords = logits.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const double l = double(logits.at(r, 0));
        const double y = target.contains(coords[r]) ? 1.0 : 0.0;
        const double softplus = l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l));
        res.value += softplus - y * l;
        res.grad.at(r, 0) = T((1.0 / (1.0 + std::exp(-l)) - y) / n);
    }
    res.value /= n;
    return res;
}

/// Mean |pred - x| over the voxels of x (all of which must be active in pred).
template <typename T>
ScalarLoss<T> l1_on_mask(const BasicSparseVolume<T>& pred, const BasicSparseVolume<T>& x) {
    ScalarLoss<T> res{0.0, pred.zeros_like()};
    if (x.empty())
        return res;
    const double n = double(x.data().size());
    const auto& coords = x.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int p = pred.mask().find(coords[r]);
        DIDS_CHECK(p >= 0, "TSDF target voxel outside the prediction mask");
        for (int c = 0; c < x.channels(); ++c) {
            const double d = double(pred.at(std::size_t(p), c)) - double(x.at(r, c));
            res.value += std::abs(d);
            res.grad.at(std::size_t(p), c) = T((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / n);
        }
    }
    res.value /= n;
    return res;
}

/// Voxels whose predicted probability exceeds `threshold`.
template <typename T>
OccupancyMask threshold_mask(const BasicSparseVolume<T>& logits, double threshold = 0.5) {
    const double cut = std::log(threshold / (1.0 - threshold));
    std::vector<VoxelCoord> keep;
    const auto& coords = logits.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r)
        if (double(logits.at(r, 0)) > cut)
            keep.push_back(coords[r]);
    return OccupancyMask(logits.extent(), std::move(keep));
}

/// Dense view of a sparse volume on the full grid; inactive voxels take `fill`.
template <typename T>
BasicSparseVolume<T> dense_view(const BasicSparseVolume<T>& v, T fill) {
    const auto d = to_dense(v, fill);
    BasicSparseVolume<T> out(OccupancyMask::full(v.extent()), v.channels());
    out.data() = d.values;
    return out;
}

struct VqLossReport {
    double total = 0;
    double bce_x = 0;   // full-resolution occupancy
    double bce_z2 = 0;  // level-2 occupancy
    double l1 = 0;      // TSDF on true-active voxels
    double vq = 0;
    double gan = 0;
    double lambda1 = 0;
    double lambda2 = 0; // effective weight (adaptive when enabled)
    double disc = 0;    // discriminator hinge loss
    double iou_x = 0;   // teacher-forced M_x IoU of this step
};

/// Weighted objective L_rec + lambda1 L_vq + lambda2 L_GAN from precomputed terms.
inline VqLossReport combine_vq_losses(double bce_x, double bce_z2, double l1, double vq, double gan, double lambda1,
                                      double lambda2) {
    VqLossReport r;
    r.bce_x = bce_x;
    r.bce_z2 = bce_z2;
    r.l1 = l1;
    r.vq = vq;
    r.gan = gan;
    r.lambda1 = lambda1;
    r.lambda2 = lambda2;
    r.total = bce_x + bce_z2 + l1 + lambda1 * vq + lambda2 * gan;
    if (!std::isfinite(r.total))
        throw NumericalError("non-finite autoencoder loss");
    return r;
}

/// ||grad_rec|| / (||grad_gan|| + 1e-4), clipped to [0, 1e4], times the base weight.
inline double adaptive_gan_weight(double rec_norm, double gan_norm, double base) {
    return std::clamp(rec_norm / (gan_norm + 1e-4), 0.0, 1e4) * base;
}

/// Encoder, shared codebook, G1, G2 and discriminator.
template <typename T>
class OccupancyAutoencoder {
public:
    struct Reconstruction {
        OccupancyMask mask_z1, mask_z2, mask_x;
        LatentVolume z1, z2;
        SparseVolume tsdf; // on mask_x
    };

    OccupancyAutoencoder() = default;
    OccupancyAutoencoder(const VqSpec& spec, Rng& rng)
        : spec_(spec),
          encoder_(spec.channels, spec.quantizer == QuantizerKind::Gumbel ? spec.codebook_size : spec.latent_dim, rng),
          codebook_("codebook", spec.codebook_size, spec.latent_dim, rng, spec.codebook_init),
          g1_(spec.latent_dim, spec.channels, rng), g2_(spec.latent_dim, spec.channels, spec.fine_channels, rng),
          disc_(spec.disc_channels, rng) {}

    const VqSpec& spec() const { return spec_; }
    Codebook<T>& codebook() { return codebook_; }
    const Codebook<T>& codebook() const { return codebook_; }
    VqEncoder<T>& encoder() { return encoder_; }
    const VqEncoder<T>& encoder() const { return encoder_; }
    MaskDecoder1<T>& g1() { return g1_; }
    MaskDecoder2<T>& g2() { return g2_; }
    PatchDiscriminator<T>& discriminator() { return disc_; }

    double gumbel_tau(long step) const {
        const double f = std::clamp(double(step) / double(std::max<long>(1, spec_.gumbel_anneal_steps)), 0.0, 1.0);
        return spec_.gumbel_tau_start * std::pow(spec_.gumbel_tau_end / spec_.gumbel_tau_start, f);
    }

    /// Inference-mode quantization of an encoder output level.
    Quantized<T> quantize_level(const BasicSparseVolume<T>& pre) const {
        if (spec_.quantizer == QuantizerKind::Nearest)
            return quantize(pre, codebook_);
        auto g = gumbel_quantize(pre, codebook_, 1.0, nullptr);
        return {std::move(g.zq), std::move(g.indices)};
    }

    /// Nearest codebook vectors for continuous (e.g. sampled) latents.
    LatentVolume snap(const SparseVolume& z, int level) const {
        auto q = quantize(z.template cast<T>(), codebook_);
        return {level, q.zq.template cast<float>(), std::move(q.indices)};
    }

    BasicSparseVolume<T> decode_mask_level1(const BasicSparseVolume<T>& z1q) const { return g1_.forward(z1q); }
    typename MaskDecoder2<T>::Output decode_mask_level2(const BasicSparseVolume<T>& z1q, const BasicSparseVolume<T>& z2q) const {
        return g2_.forward(z1q, z2q);
    }

    /// Encode, quantize and decode through predicted masks. Predicted level-2 voxels that the
    /// encoder did not produce take the codebook entry nearest to the zero vector.
    Reconstruction reconstruct(const SparseVolume& x) const {
        const auto xt = x.template cast<T>();
        const auto enc = encoder_.forward(xt);
        Reconstruction out;
        const auto q1 = quantize_level(enc.z1);
        const auto q2 = quantize_level(enc.z2);
        out.mask_z1 = q1.zq.mask();
        out.z1 = {1, q1.zq.template cast<float>(), q1.indices};
        out.mask_z2 = threshold_mask(g1_.forward(q1.zq), spec_.mask_threshold);
        BasicSparseVolume<T> zero(OccupancyMask(GridExtent{1, 1, 1}, {{0, 0, 0}}), spec_.latent_dim);
        const int fallback = quantize(zero, codebook_).indices[0];
        std::vector<int> idx(out.mask_z2.size());
        const auto& c2 = out.mask_z2.coords();
        for (std::size_t r = 0; r < c2.size(); ++r) {
            const int src = q2.zq.mask().find(c2[r]);
            idx[r] = src >= 0 ? q2.indices[std::size_t(src)] : fallback;
        }
        const auto z2 = embed_indices(out.mask_z2, idx, codebook_);
        out.z2 = {2, z2.template cast<float>(), idx};
        const auto dec = g2_.forward(q1.zq, z2);
        out.mask_x = threshold_mask(dec.logits, spec_.mask_threshold);
        out.tsdf = restrict_to(dec.tsdf, out.mask_x).template cast<float>();
        return out;
    }

    /// One generator step (and discriminator step once the GAN is active) on a single crop.
    VqLossReport train_step(const SparseVolume& x, long step, Adam<T>& opt, Adam<T>& opt_disc, Rng& rng) {
        DIDS_CHECK(!x.empty(), "autoencoder training crop is empty");
        auto params = this->params();
        zero_grads(params);
        const auto xt = x.template cast<T>();
        const auto& mx = x.mask();
        const auto mz2 = mx.maxpool(VqSpec::kStride2);

        typename VqEncoder<T>::Tape et;
        const auto enc = encoder_.forward(xt, &et);
        auto g_pre1 = enc.z1.zeros_like();
        auto g_pre2 = enc.z2.zeros_like();

        // Quantize both levels.
        double vq = 0;
        BasicSparseVolume<T> zq1, zq2;
        std::optional<GumbelQuantized<T>> gq1, gq2;
        std::optional<Quantized<T>> nq1, nq2;
        if (spec_.quantizer == QuantizerKind::Nearest) {
            nq1 = quantize(enc.z1, codebook_);
            nq2 = quantize(enc.z2, codebook_);
            vq += vq_codebook_loss(enc.z1, *nq1, codebook_, spec_.commitment, g_pre1, spec_.lambda1);
            vq += vq_codebook_loss(enc.z2, *nq2, codebook_, spec_.commitment, g_pre2, spec_.lambda1);
            zq1 = nq1->zq;
            zq2 = nq2->zq;
        } else {
            const double tau = gumbel_tau(step);
            gq1 = gumbel_quantize(enc.z1, codebook_, tau, &rng);
            gq2 = gumbel_quantize(enc.z2, codebook_, tau, &rng);
            vq += gumbel_kl_loss(enc.z1, g_pre1, spec_.lambda1 * spec_.gumbel_kl_weight) * spec_.gumbel_kl_weight;
            vq += gumbel_kl_loss(enc.z2, g_pre2, spec_.lambda1 * spec_.gumbel_kl_weight) * spec_.gumbel_kl_weight;
            zq1 = gq1->zq;
            zq2 = gq2->zq;
        }

        // Decoders; G2 sees the ground-truth level-2 mask.
        typename MaskDecoder1<T>::Tape t1;
        const auto logits_z2 = g1_.forward(zq1, &t1);
        typename MaskDecoder2<T>::Tape t2;
        const auto dec = g2_.forward(zq1, zq2, &t2);

        auto bz2 = bce_with_logits(logits_z2, mz2);
        auto bx = bce_with_logits(dec.logits, mx);
        auto l1 = l1_on_mask(dec.tsdf, xt);

        // GAN term on the dense TSDF of predicted-active voxels.
        double gan = 0, lambda2 = 0, dloss = 0;
        auto g_tsdf = l1.grad;
        const bool gan_on = spec_.use_gan && step >= spec_.disc_start;
        const auto pred_mask = threshold_mask(dec.logits, spec_.mask_threshold);
        if (gan_on && !pred_mask.empty()) {
            const auto fake_sparse = restrict_to(dec.tsdf, pred_mask);
            const auto fake = dense_view(fake_sparse, T(spec_.tsdf_fill));
            typename PatchDiscriminator<T>::Tape dt;
            const auto d_fake = disc_.forward(fake, &dt);
            double m = 0;
            for (T v : d_fake.data())
                m += double(v);
            gan = -m / double(d_fake.data().size());
            auto g_d = d_fake.zeros_like();
            for (auto& v : g_d.data())
                v = T(-1.0 / double(d_fake.data().size()));
            // Gradient w.r.t. the dense fake, scattered back to the predicted voxels; the
            // discriminator's own parameter gradients from this pass are discarded below.
            const auto g_fake = disc_.backward(dt, g_d);
            auto g_gan = dec.tsdf.zeros_like();
            const auto& pc = pred_mask.coords();
            for (std::size_t r = 0; r < pc.size(); ++r) {
                const int dst = dec.tsdf.mask().find(pc[r]);
                g_gan.at(std::size_t(dst), 0) = g_fake.at(std::size_t(fake.extent().linear(pc[r])), 0);
            }
            lambda2 = spec_.lambda2;
            if (spec_.adaptive_lambda2) {
                const double rn = last_layer_grad_norm(t2, l1.grad);
                const double gn = last_layer_grad_norm(t2, g_gan);
                lambda2 = adaptive_gan_weight(rn, gn, spec_.lambda2);
            }
            g_tsdf = add(g_tsdf, scaled(g_gan, lambda2));
        }

        // Backward through decoders, quantizers and encoder.
        auto [g_z1_from_g2, g_zq2] = g2_.backward(t2, bx.grad, g_tsdf);
        auto g_zq1 = add(g1_.backward(t1, bz2.grad), g_z1_from_g2);
        if (spec_.quantizer == QuantizerKind::Nearest) {
            g_pre1 = add(g_pre1, g_zq1);
            g_pre2 = add(g_pre2, g_zq2);
        } else {
            g_pre1 = add(g_pre1, gumbel_backward(*gq1, g_zq1, codebook_));
            g_pre2 = add(g_pre2, gumbel_backward(*gq2, g_zq2, codebook_));
        }
        encoder_.backward(et, g_pre1, g_pre2);

        auto report = combine_vq_losses(bx.value, bz2.value, l1.value, vq, gan, spec_.lambda1, lambda2);
        report.iou_x = pred_mask.iou(mx);
        ParamList<T> gen = generator_params();
        if (!grads_finite(gen))
            throw NumericalError("non-finite autoencoder gradient");
        opt.step(gen);

        auto dparams = disc_params();
        zero_grads(dparams);
        if (gan_on && !pred_mask.empty()) {
            dloss = discriminator_step(xt, restrict_to(dec.tsdf, pred_mask));
            if (!grads_finite(dparams))
                throw NumericalError("non-finite discriminator gradient");
            opt_disc.step(dparams);
        }
        report.disc = dloss;
        return report;
    }

    ParamList<T> generator_params() {
        ParamList<T> p;
        encoder_.collect(p);
        codebook_.collect(p);
        g1_.collect(p);
        g2_.collect(p);
        return p;
    }
    ParamList<T> disc_params() {
        ParamList<T> p;
        disc_.collect(p);
        return p;
    }
    ParamList<T> params() {
        auto p = generator_params();
        disc_.collect(p);
        return p;
    }

private:
    double last_layer_grad_norm(const typename MaskDecoder2<T>::Tape& t2, const BasicSparseVolume<T>& g_tsdf) {
        Conv3d<T> probe = g2_.tsdf_last_layer();
        probe.weight.zero_grad();
        probe.bias.zero_grad();
        probe.backward(g2_.tsdf_tape(t2).s, g_tsdf);
        double s = 0;
        for (T v : probe.weight.grad)
            s += double(v) * double(v);
        return std::sqrt(s);
    }

    /// 0.5 (mean relu(1 - D(real)) + mean relu(1 + D(fake))); accumulates discriminator gradients.
    double discriminator_step(const BasicSparseVolume<T>& real, const BasicSparseVolume<T>& fake_sparse) {
        const T fill = T(spec_.tsdf_fill);
        double total = 0;
        for (int which = 0; which < 2; ++which) {
            const auto in = dense_view(which == 0 ? real : fake_sparse, fill);
            typename PatchDiscriminator<T>::Tape dt;
            const auto d = disc_.forward(in, &dt);
            const double n = double(d.data().size());
            auto g = d.zeros_like();
            for (std::size_t i = 0; i < d.data().size(); ++i) {
                const double v = double(d.data()[i]);
                const double margin = which == 0 ? 1.0 - v : 1.0 + v;
                if (margin > 0) {
                    total += 0.5 * margin / n;
                    g.data()[i] = T((which == 0 ? -0.5 : 0.5) / n);
                }
            }
            disc_.backward(dt, g);
        }
        return total;
    }

    VqSpec spec_;
    VqEncoder<T> encoder_;
    Codebook<T> codebook_;
    MaskDecoder1<T> g1_;
    MaskDecoder2<T> g2_;
    PatchDiscriminator<T> disc_;
};

} // namespace dids
