// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/common.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dids {

struct VoxelCoord {
    int i = 0;
    int j = 0;
    int k = 0;

    friend auto operator<=>(const VoxelCoord&, const VoxelCoord&) = default;
    VoxelCoord operator+(const VoxelCoord& o) const { return {i + o.i, j + o.j, k + o.k}; }
};

struct GridExtent {
    int h = 0;
    int w = 0;
    int l = 0;

    friend bool operator==(const GridExtent&, const GridExtent&) = default;

    std::int64_t volume() const { return std::int64_t(h) * w * l; }
    bool valid() const { return h > 0 && w > 0 && l > 0; }
    bool contains(const VoxelCoord& c) const {
        return c.i >= 0 && c.j >= 0 && c.k >= 0 && c.i < h && c.j < w && c.k < l;
    }
    /// Row-major linear index; ordering of linear indices equals lexicographic (i, j, k) order.
    std::int64_t linear(const VoxelCoord& c) const { return (std::int64_t(c.i) * w + c.j) * l + c.k; }
    VoxelCoord coord(std::int64_t idx) const {
        return {int(idx / (std::int64_t(w) * l)), int((idx / l) % w), int(idx % l)};
    }
    bool divisible_by(int f) const { return h % f == 0 && w % f == 0 && l % f == 0; }
    GridExtent coarsened(int f) const { return {h / f, w / f, l / f}; }
    GridExtent refined(int f) const { return {h * f, w * f, l * f}; }
};

/// Per kernel offset, the (output row, input row) pairs whose input neighbor is active.
struct NeighborMap {
    int ksize = 0;
    std::vector<std::vector<std::pair<int, int>>> pairs;
};

/// Sorted, duplicate-free coordinate set with O(1) lookup. Shared between volumes that carry the
/// same sparsity pattern; immutable except for the lazily built neighbor-map cache.
class Topology {
public:
    Topology(GridExtent extent, std::vector<VoxelCoord> coords) : extent_(extent), coords_(std::move(coords)) {
        DIDS_CHECK(extent_.valid(), "grid extent must be positive");
        std::sort(coords_.begin(), coords_.end());
        coords_.erase(std::unique(coords_.begin(), coords_.end()), coords_.end());
        for (const auto& c : coords_)
            DIDS_CHECK(extent_.contains(c), "voxel coordinate outside grid extent");
        if (extent_.volume() <= kDenseLookupLimit) {
            dense_.assign(static_cast<std::size_t>(extent_.volume()), -1);
            for (std::size_t r = 0; r < coords_.size(); ++r)
                dense_[static_cast<std::size_t>(extent_.linear(coords_[r]))] = int(r);
        } else {
            sparse_.reserve(coords_.size());
            for (std::size_t r = 0; r < coords_.size(); ++r)
                sparse_.emplace(extent_.linear(coords_[r]), int(r));
        }
    }

    const GridExtent& extent() const { return extent_; }
    const std::vector<VoxelCoord>& coords() const { return coords_; }
    std::size_t size() const { return coords_.size(); }

    /// Row of `c`, or -1 when inactive or out of bounds.
    int find(const VoxelCoord& c) const {
        if (!extent_.contains(c))
            return -1;
        const auto idx = extent_.linear(c);
        if (!dense_.empty())
            return dense_[static_cast<std::size_t>(idx)];
        auto it = sparse_.find(idx);
        return it == sparse_.end() ? -1 : it->second;
    }

    /// Submanifold neighbor pairs for an odd cubic kernel; offsets enumerated lexicographically.
    std::shared_ptr<const NeighborMap> neighbor_map(int ksize) const {
        std::lock_guard lock(cache_mutex_);
        auto& slot = neighbor_cache_[ksize];
        if (!slot) {
            auto map = std::make_shared<NeighborMap>();
            map->ksize = ksize;
            const int r = ksize / 2;
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj)
                    for (int dk = -r; dk <= r; ++dk) {
                        std::vector<std::pair<int, int>> p;
                        for (std::size_t o = 0; o < coords_.size(); ++o) {
                            const int in = find(coords_[o] + VoxelCoord{di, dj, dk});
                            if (in >= 0)
                                p.emplace_back(int(o), in);
                        }
                        map->pairs.push_back(std::move(p));
                    }
            slot = std::move(map);
        }
        return slot;
    }

private:
    static constexpr std::int64_t kDenseLookupLimit = std::int64_t(1) << 24;

    GridExtent extent_;
    std::vector<VoxelCoord> coords_;
    std::vector<int> dense_;
    std::unordered_map<std::int64_t, int> sparse_;
    mutable std::mutex cache_mutex_;
    mutable std::map<int, std::shared_ptr<const NeighborMap>> neighbor_cache_;
};

/// Binary sparsity pattern over a bounded grid.
class OccupancyMask {
public:
    OccupancyMask() : OccupancyMask(GridExtent{1, 1, 1}, {}) {}
    OccupancyMask(GridExtent extent, std::vector<VoxelCoord> coords)
        : topo_(std::make_shared<const Topology>(extent, std::move(coords))) {}
    explicit OccupancyMask(std::shared_ptr<const Topology> topo) : topo_(std::move(topo)) {}

    static OccupancyMask full(GridExtent extent) {
        std::vector<VoxelCoord> c;
        c.reserve(static_cast<std::size_t>(extent.volume()));
        for (int i = 0; i < extent.h; ++i)
            for (int j = 0; j < extent.w; ++j)
                for (int k = 0; k < extent.l; ++k)
                    c.push_back({i, j, k});
        return OccupancyMask(extent, std::move(c));
    }

    const GridExtent& extent() const { return topo_->extent(); }
    const std::vector<VoxelCoord>& coords() const { return topo_->coords(); }
    std::size_t size() const { return topo_->size(); }
    bool empty() const { return topo_->size() == 0; }
    bool contains(const VoxelCoord& c) const { return topo_->find(c) >= 0; }
    int find(const VoxelCoord& c) const { return topo_->find(c); }
    const std::shared_ptr<const Topology>& topology() const { return topo_; }

    double occupancy_rate() const { return double(size()) / double(extent().volume()); }

    /// Parent cells (coordinate / factor) of every active voxel.
    OccupancyMask maxpool(int factor) const {
        DIDS_CHECK(extent().divisible_by(factor), "extent not divisible by pooling factor");
        std::vector<VoxelCoord> p;
        p.reserve(size());
        for (const auto& c : coords())
            p.push_back({c.i / factor, c.j / factor, c.k / factor});
        return OccupancyMask(extent().coarsened(factor), std::move(p));
    }

    /// All factor^3 children of every active voxel.
    OccupancyMask children(int factor) const {
        std::vector<VoxelCoord> ch;
        ch.reserve(size() * std::size_t(factor * factor * factor));
        for (const auto& c : coords())
            for (int a = 0; a < factor; ++a)
                for (int b = 0; b < factor; ++b)
                    for (int d = 0; d < factor; ++d)
                        ch.push_back({c.i * factor + a, c.j * factor + b, c.k * factor + d});
        return OccupancyMask(extent().refined(factor), std::move(ch));
    }

    bool same_as(const OccupancyMask& o) const {
        return topo_ == o.topo_ || (extent() == o.extent() && coords() == o.coords());
    }

    bool subset_of(const OccupancyMask& o) const {
        return std::all_of(coords().begin(), coords().end(), [&](const VoxelCoord& c) { return o.contains(c); });
    }

    std::size_t intersection_size(const OccupancyMask& o) const {
        std::size_t n = 0;
        for (const auto& c : coords())
            n += o.contains(c) ? 1 : 0;
        return n;
    }

    double iou(const OccupancyMask& o) const {
        const std::size_t inter = intersection_size(o);
        const std::size_t uni = size() + o.size() - inter;
        return uni == 0 ? 1.0 : double(inter) / double(uni);
    }

private:
    std::shared_ptr<const Topology> topo_;
};

/// Coordinate-indexed feature volume; rows follow the mask's lexicographic coordinate order.
template <typename T>
class BasicSparseVolume {
public:
    using value_type = T;

    BasicSparseVolume() = default;
    BasicSparseVolume(OccupancyMask mask, int channels)
        : mask_(std::move(mask)), channels_(channels), data_(mask_.size() * std::size_t(channels), T(0)) {
        DIDS_CHECK(channels > 0, "channel count must be positive");
    }
    BasicSparseVolume(OccupancyMask mask, int channels, std::vector<T> data)
        : mask_(std::move(mask)), channels_(channels), data_(std::move(data)) {
        DIDS_CHECK(channels > 0, "channel count must be positive");
        DIDS_CHECK(data_.size() == mask_.size() * std::size_t(channels), "feature buffer size mismatch");
    }

    const OccupancyMask& mask() const { return mask_; }
    const GridExtent& extent() const { return mask_.extent(); }
    int channels() const { return channels_; }
    std::size_t size() const { return mask_.size(); }
    bool empty() const { return mask_.empty(); }

    std::span<T> row(std::size_t r) { return {data_.data() + r * channels_, std::size_t(channels_)}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * channels_, std::size_t(channels_)}; }
    T& at(std::size_t r, int c) { return data_[r * channels_ + c]; }
    T at(std::size_t r, int c) const { return data_[r * channels_ + c]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(double(v)); });
    }

    /// Same mask, channel count and features.
    bool identical(const BasicSparseVolume& o) const {
        return channels_ == o.channels_ && mask_.same_as(o.mask_) && data_ == o.data_;
    }

    BasicSparseVolume zeros_like() const { return BasicSparseVolume(mask_, channels_); }

    template <typename U>
    BasicSparseVolume<U> cast() const {
        return BasicSparseVolume<U>(mask_, channels_, std::vector<U>(data_.begin(), data_.end()));
    }

private:
    OccupancyMask mask_;
    int channels_ = 1;
    std::vector<T> data_;
};

using SparseVolume = BasicSparseVolume<float>;

/// Full H x W x L x C array; voxel-major, channel-minor.
template <typename T>
struct BasicDenseVolume {
    GridExtent extent;
    int channels = 1;
    std::vector<T> values;

    BasicDenseVolume() = default;
    BasicDenseVolume(GridExtent e, int c, T fill = T(0))
        : extent(e), channels(c), values(static_cast<std::size_t>(e.volume()) * std::size_t(c), fill) {}

    T& at(const VoxelCoord& v, int c) { return values[std::size_t(extent.linear(v)) * channels + c]; }
    T at(const VoxelCoord& v, int c) const { return values[std::size_t(extent.linear(v)) * channels + c]; }
};

using DenseVolume = BasicDenseVolume<float>;

/// Densify; inactive voxels take `fill`.
template <typename T>
BasicDenseVolume<T> to_dense(const BasicSparseVolume<T>& v, T fill = T(0)) {
    BasicDenseVolume<T> d(v.extent(), v.channels(), fill);
    const auto& coords = v.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r)
        for (int c = 0; c < v.channels(); ++c)
            d.at(coords[r], c) = v.at(r, c);
    return d;
}

/// Gather dense values at the mask's voxels.
template <typename T>
BasicSparseVolume<T> from_dense(const BasicDenseVolume<T>& d, const OccupancyMask& mask) {
    DIDS_CHECK(d.extent == mask.extent(), "dense extent does not match mask extent");
    BasicSparseVolume<T> v(mask, d.channels);
    const auto& coords = mask.coords();
    for (std::size_t r = 0; r < coords.size(); ++r)
        for (int c = 0; c < d.channels; ++c)
            v.at(r, c) = d.at(coords[r], c);
    return v;
}

/// Values of `v` at the voxels of `mask`; every mask voxel must be active in `v`.
template <typename T>
BasicSparseVolume<T> restrict_to(const BasicSparseVolume<T>& v, const OccupancyMask& mask) {
    DIDS_CHECK(v.extent() == mask.extent(), "extent mismatch in restriction");
    BasicSparseVolume<T> out(mask, v.channels());
    const auto& coords = mask.coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int src = v.mask().find(coords[r]);
        DIDS_CHECK(src >= 0, "restriction mask is not a subset of the volume mask");
        std::copy_n(v.row(std::size_t(src)).begin(), v.channels(), out.row(r).begin());
    }
    return out;
}

} // namespace dids
