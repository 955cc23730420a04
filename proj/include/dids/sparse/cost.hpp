// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/sparse/volume.hpp>

#include <cstdint>
#include <vector>

namespace dids {

struct LayerSpec {
    enum class Kind { Conv, Down };
    Kind kind = Kind::Conv;
    int ksize = 3; // cubic kernel edge for Conv, pooling factor for Down
    int cin = 1;
    int cout = 1;
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;

    /// `depth` submanifold convolutions of width `channels`, the first reading `in_channels`.
    static NetworkSpec conv_stack(int in_channels, int channels, int depth, int ksize = 3) {
        NetworkSpec n;
        for (int d = 0; d < depth; ++d)
            n.layers.push_back({LayerSpec::Kind::Conv, ksize, d == 0 ? in_channels : channels, channels});
        return n;
    }
};

struct OpCostReport {
    std::uint64_t sparse_macs = 0;
    std::uint64_t dense_macs = 0;
    std::uint64_t active_voxels = 0;
    std::uint64_t dense_voxels = 0;

    double mac_ratio() const { return dense_macs == 0 ? 0.0 : double(sparse_macs) / double(dense_macs); }
};

namespace detail {

// Number of (voxel, tap) pairs with the tap inside [0, n) along one axis.
inline std::uint64_t in_bound_taps(int n, int radius) {
    std::uint64_t s = 0;
    for (int x = 0; x < n; ++x)
        s += std::uint64_t(std::min(x + radius, n - 1) - std::max(x - radius, 0) + 1);
    return s;
}

} // namespace detail

/// Multiply-accumulate counts of running `net` sparsely on `mask` and densely on the full grid.
/// Dense counts include only in-bound taps, so a fully occupied mask gives equal counts.
inline OpCostReport count_ops(const NetworkSpec& net, const OccupancyMask& mask) {
    OpCostReport rep;
    rep.active_voxels = mask.size();
    rep.dense_voxels = std::uint64_t(mask.extent().volume());
    OccupancyMask cur = mask;
    for (const auto& layer : net.layers) {
        const std::uint64_t chan = std::uint64_t(layer.cin) * std::uint64_t(layer.cout);
        const GridExtent e = cur.extent();
        if (layer.kind == LayerSpec::Kind::Conv) {
            std::uint64_t pairs = 0;
            if (!cur.empty()) {
                const auto nmap = cur.topology()->neighbor_map(layer.ksize);
                for (const auto& p : nmap->pairs)
                    pairs += p.size();
            }
            const int r = layer.ksize / 2;
            const std::uint64_t dense_pairs =
                detail::in_bound_taps(e.h, r) * detail::in_bound_taps(e.w, r) * detail::in_bound_taps(e.l, r);
            rep.sparse_macs += pairs * chan;
            rep.dense_macs += dense_pairs * chan;
        } else {
            rep.sparse_macs += std::uint64_t(cur.size()) * chan;
            rep.dense_macs += std::uint64_t(e.volume()) * chan;
            cur = cur.maxpool(layer.ksize);
        }
    }
    return rep;
}

} // namespace dids
