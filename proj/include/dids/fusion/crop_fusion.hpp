// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
// Joint diffusion over overlapping crops. Each crop takes one reverse step on its own; a barrier
// then merges the crops into the scene volume and writes the merged values back, so every crop
// starts the next step from values that agree on all shared voxels.
//
#pragma once

#include <dids/diffusion/engine.hpp>

#include <algorithm>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace dids {

struct CropBox {
    VoxelCoord origin;
    GridExtent size{96, 96, 96};

    bool contains(const VoxelCoord& p) const {
        return p.i >= origin.i && p.j >= origin.j && p.k >= origin.k && p.i < origin.i + size.h &&
               p.j < origin.j + size.w && p.k < origin.k + size.l;
    }
};

/// Crops bound to a scene mask, with the cover index G(p) stored per scene-mask row.
struct CropLayout {
    OccupancyMask mask;
    std::vector<CropBox> boxes;
    std::vector<OccupancyMask> local;          // per crop, the mask voxels inside it (crop coordinates)
    std::vector<std::vector<int>> global_rows; // per crop, local row -> scene row
    std::vector<int> cover_offset;             // CSR over scene rows
    std::vector<std::pair<int, int>> cover_entries; // (crop, local row)

    std::size_t crops() const { return boxes.size(); }
    int cover_size(std::size_t row) const { return cover_offset[row + 1] - cover_offset[row]; }
    /// G(p) as crop ids in increasing order; empty for inactive p.
    std::vector<int> cover(const VoxelCoord& p) const {
        std::vector<int> g;
        const int r = mask.find(p);
        if (r < 0)
            return g;
        for (int e = cover_offset[std::size_t(r)]; e < cover_offset[std::size_t(r) + 1]; ++e)
            g.push_back(cover_entries[std::size_t(e)].first);
        return g;
    }
};

/// Tile origins along one axis: stride size - overlap, last tile clamped to the boundary.
inline std::vector<int> tile_origins(int extent, int size, int overlap) {
    if (size >= extent)
        return {0};
    DIDS_CHECK(overlap >= 0 && overlap < size, "overlap must be smaller than the crop size");
    std::vector<int> o;
    for (int x = 0;;) {
        o.push_back(x);
        if (x + size >= extent)
            break;
        x = std::min(x + size - overlap, extent - size);
    }
    return o;
}

/// Binds `boxes` to `mask`; boxes without active voxels are dropped.
inline CropLayout bind_layout(const OccupancyMask& mask, const std::vector<CropBox>& boxes) {
    CropLayout L;
    L.mask = mask;
    std::vector<std::vector<std::pair<int, int>>> per_row(mask.size());
    const auto& coords = mask.coords();
    for (const auto& b : boxes) {
        DIDS_CHECK(b.origin.i >= 0 && b.origin.j >= 0 && b.origin.k >= 0 && b.origin.i + b.size.h <= mask.extent().h &&
                       b.origin.j + b.size.w <= mask.extent().w && b.origin.k + b.size.l <= mask.extent().l,
                   "crop box outside the scene extent");
        std::vector<VoxelCoord> lc;
        std::vector<int> rows;
        for (std::size_t r = 0; r < coords.size(); ++r)
            if (b.contains(coords[r])) {
                lc.push_back({coords[r].i - b.origin.i, coords[r].j - b.origin.j, coords[r].k - b.origin.k});
                rows.push_back(int(r));
            }
        if (rows.empty())
            continue;
        const int k = int(L.boxes.size());
        for (std::size_t lr = 0; lr < rows.size(); ++lr)
            per_row[std::size_t(rows[lr])].emplace_back(k, int(lr));
        L.boxes.push_back(b);
        L.local.emplace_back(b.size, std::move(lc));
        L.global_rows.push_back(std::move(rows));
    }
    L.cover_offset.assign(mask.size() + 1, 0);
    for (std::size_t r = 0; r < per_row.size(); ++r) {
        L.cover_offset[r + 1] = L.cover_offset[r] + int(per_row[r].size());
        L.cover_entries.insert(L.cover_entries.end(), per_row[r].begin(), per_row[r].end());
    }
    return L;
}

/// Axis-aligned tiling of the scene extent; crops larger than the scene are clamped to it.
inline CropLayout plan_crops(const OccupancyMask& mask, GridExtent crop_size = {96, 96, 96}, int overlap = 32) {
    DIDS_CHECK(crop_size.valid(), "crop size must be positive");
    DIDS_CHECK(overlap >= 0, "overlap must be non-negative");
    const GridExtent e = mask.extent();
    const GridExtent size{std::min(crop_size.h, e.h), std::min(crop_size.w, e.w), std::min(crop_size.l, e.l)};
    std::vector<CropBox> boxes;
    for (int i : tile_origins(e.h, size.h, overlap))
        for (int j : tile_origins(e.w, size.w, overlap))
            for (int k : tile_origins(e.l, size.l, overlap))
                boxes.push_back({{i, j, k}, size});
    return bind_layout(mask, boxes);
}

/// Per-crop views of a scene volume.
inline std::vector<SparseVolume> split_to_crops(const SparseVolume& scene, const CropLayout& L) {
    DIDS_CHECK(scene.mask().same_as(L.mask), "scene volume does not match the layout mask");
    std::vector<SparseVolume> out;
    for (std::size_t k = 0; k < L.crops(); ++k) {
        SparseVolume v(L.local[k], scene.channels());
        for (std::size_t r = 0; r < L.global_rows[k].size(); ++r)
            std::copy_n(scene.row(std::size_t(L.global_rows[k][r])).begin(), scene.channels(), v.row(r).begin());
        out.push_back(std::move(v));
    }
    return out;
}

/// Overwrites every crop with the scene values at its voxels.
inline void write_back(const SparseVolume& scene, const CropLayout& L, std::vector<SparseVolume>& crops) {
    for (std::size_t k = 0; k < L.crops(); ++k)
        for (std::size_t r = 0; r < L.global_rows[k].size(); ++r)
            std::copy_n(scene.row(std::size_t(L.global_rows[k][r])).begin(), scene.channels(), crops[k].row(r).begin());
}

namespace detail {

inline void check_crops(const std::vector<SparseVolume>& crops, const CropLayout& L) {
    DIDS_CHECK(crops.size() == L.crops(), "crop count does not match the layout");
    for (std::size_t k = 0; k < crops.size(); ++k)
        DIDS_CHECK(crops[k].mask().same_as(L.local[k]) && crops[k].channels() == crops[0].channels(),
                   "crop volume does not match its layout mask");
}

} // namespace detail

/// For each voxel, the value of one covering crop chosen uniformly at random. Choices come from
/// a counter-based stream keyed by (voxel, timestep), so they do not depend on execution order.
inline SparseVolume stochastic_fuse(const std::vector<SparseVolume>& crops, const std::vector<int>& timesteps,
                                    const CropLayout& L, const CounterRng& rng) {
    detail::check_crops(crops, L);
    DIDS_CHECK(timesteps.size() == crops.size(), "one timestep per crop is required");
    DIDS_CHECK(std::all_of(timesteps.begin(), timesteps.end(), [&](int t) { return t == timesteps.front(); }),
               "crops are at inconsistent timesteps");
    const int ch = crops.empty() ? 1 : crops[0].channels();
    SparseVolume out(L.mask, ch);
    const auto& coords = L.mask.coords();
    const auto t = std::uint64_t(timesteps.empty() ? 0 : timesteps.front());
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const int n = L.cover_size(r);
        if (n == 0)
            continue;
        const auto pick = n == 1 ? 0 : int(rng.below(std::uint64_t(n), std::uint64_t(L.mask.extent().linear(coords[r])), t));
        const auto [k, lr] = L.cover_entries[std::size_t(L.cover_offset[r] + pick)];
        std::copy_n(crops[std::size_t(k)].row(std::size_t(lr)).begin(), ch, out.row(r).begin());
    }
    return out;
}

/// Arithmetic mean over the covering crops.
inline SparseVolume average_fuse(const std::vector<SparseVolume>& crops, const CropLayout& L) {
    detail::check_crops(crops, L);
    const int ch = crops.empty() ? 1 : crops[0].channels();
    SparseVolume out(L.mask, ch);
    for (std::size_t r = 0; r < L.mask.size(); ++r) {
        const int n = L.cover_size(r);
        for (int e = L.cover_offset[r]; e < L.cover_offset[r + 1]; ++e) {
            const auto [k, lr] = L.cover_entries[std::size_t(e)];
            for (int c = 0; c < ch; ++c)
                out.at(r, c) += crops[std::size_t(k)].at(std::size_t(lr), c);
        }
        if (n > 1)
            for (int c = 0; c < ch; ++c)
                out.at(r, c) /= float(n);
    }
    return out;
}

/// Index of the covering crop whose center is nearest to each scene voxel (lowest index on ties).
inline std::vector<int> nearest_center_owner(const CropLayout& L) {
    std::vector<int> owner(L.mask.size(), -1);
    const auto& coords = L.mask.coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        double best = 0;
        for (int e = L.cover_offset[r]; e < L.cover_offset[r + 1]; ++e) {
            const int k = L.cover_entries[std::size_t(e)].first;
            const auto& b = L.boxes[std::size_t(k)];
            const double di = coords[r].i - (b.origin.i + 0.5 * (b.size.h - 1));
            const double dj = coords[r].j - (b.origin.j + 0.5 * (b.size.w - 1));
            const double dk = coords[r].k - (b.origin.k + 0.5 * (b.size.l - 1));
            const double d = di * di + dj * dj + dk * dk;
            if (owner[r] < 0 || d < best) {
                best = d;
                owner[r] = k;
            }
        }
    }
    return owner;
}

/// Scene volume that takes each voxel from its nearest-center crop.
inline SparseVolume assemble_nearest(const std::vector<SparseVolume>& crops, const CropLayout& L) {
    detail::check_crops(crops, L);
    const int ch = crops.empty() ? 1 : crops[0].channels();
    const auto owner = nearest_center_owner(L);
    SparseVolume out(L.mask, ch);
    for (std::size_t r = 0; r < L.mask.size(); ++r)
        for (int e = L.cover_offset[r]; e < L.cover_offset[r + 1]; ++e) {
            const auto [k, lr] = L.cover_entries[std::size_t(e)];
            if (k == owner[r])
                std::copy_n(crops[std::size_t(k)].row(std::size_t(lr)).begin(), ch, out.row(r).begin());
        }
    return out;
}

enum class FusionMode { Stochastic, Average, Independent };

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "stochastic")
        return FusionMode::Stochastic;
    if (s == "average")
        return FusionMode::Average;
    if (s == "independent")
        return FusionMode::Independent;
    throw InputError("unknown fusion mode: " + s + " (expected stochastic, average or independent)");
}

inline const char* to_string(FusionMode m) {
    switch (m) {
    case FusionMode::Stochastic:
        return "stochastic";
    case FusionMode::Average:
        return "average";
    default:
        return "independent";
    }
}

/// Runs fn(0..n-1) on up to `threads` workers.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& fn) {
    const std::size_t w = std::min<std::size_t>(n, std::size_t(std::max(threads, 1)));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(w);
    std::vector<std::thread> pool;
    for (std::size_t id = 0; id < w; ++id)
        pool.emplace_back([&, id] {
            try {
                for (std::size_t i = id; i < n; i += w)
                    fn(i);
            } catch (...) {
                errors[id] = std::current_exception();
            }
        });
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

/// Per-crop views of `noise`. Shared voxels draw identical values except in Independent mode,
/// where every crop gets its own stream.
inline std::vector<NoiseField> crop_noise_fields(const CropLayout& L, const NoiseField& noise, FusionMode mode) {
    std::vector<NoiseField> fields(L.crops(), noise);
    for (std::size_t k = 0; k < fields.size(); ++k) {
        fields[k].origin = L.boxes[k].origin;
        fields[k].global = L.mask.extent();
        if (mode == FusionMode::Independent)
            fields[k].rng.seed = Rng::mix(noise.rng.seed ^ Rng::mix(0x1d0 + k));
    }
    return fields;
}

struct FusionOptions {
    FusionMode mode = FusionMode::Stochastic;
    int threads = 1;
};

/// Joint reverse diffusion over the layout's crops. Noise is keyed by scene voxel so crops agree
/// at shared voxels; in Independent mode each crop draws its own noise and never synchronizes,
/// and the result takes each voxel from its nearest-center crop. The merge after the last step
/// gives the returned volume.
inline SparseVolume fused_diffusion_loop(const EpsPredictor& model, const CropLayout& L, int channels,
                                         const SparseVolume* condition, const NoiseSchedule& sched,
                                         const SamplerOptions& opt, const FusionOptions& fusion, const NoiseField& noise) {
    DIDS_CHECK(!L.mask.empty(), "fused diffusion requires a non-empty mask");
    for (std::size_t r = 0; r < L.mask.size(); ++r)
        if (L.cover_size(r) == 0)
            throw InputError("crop layout leaves active voxels uncovered");
    if (condition)
        DIDS_CHECK(condition->mask().same_as(L.mask), "condition must share the scene mask");
    const std::size_t K = L.crops();
    const auto fields = crop_noise_fields(L, noise, fusion.mode);
    std::vector<SparseVolume> x(K), cond;
    for (std::size_t k = 0; k < K; ++k)
        x[k] = fields[k].volume(L.local[k], channels, 0);
    if (condition)
        cond = split_to_crops(*condition, L);
    const CounterRng pick{Rng::mix(noise.rng.seed ^ 0x5f0c5f0c5f0cULL)};
    const auto plan = strided_timesteps(sched, opt.steps);
    SparseVolume scene;
    auto merge = [&](int t) {
        if (fusion.mode == FusionMode::Stochastic)
            scene = stochastic_fuse(x, std::vector<int>(K, t), L, pick);
        else if (fusion.mode == FusionMode::Average)
            scene = average_fuse(x, L);
        else
            scene = assemble_nearest(x, L);
    };
    for (const auto& [t, t_prev] : plan) {
        parallel_for(K, fusion.threads, [&](std::size_t k) {
            const SparseVolume eps = model(x[k], condition ? &cond[k] : nullptr, sched.alpha_bar(t));
            if (opt.kind == SamplerKind::Ddpm) {
                const SparseVolume z = fields[k].volume(L.local[k], channels, std::uint64_t(t) + 1);
                x[k] = reverse_transition(x[k], t, t_prev, eps, sched, opt, &z);
            } else {
                x[k] = reverse_transition(x[k], t, t_prev, eps, sched, opt, nullptr);
            }
        });
        for (const auto& v : x)
            if (!v.all_finite())
                throw NumericalError("non-finite value during fused sampling");
        if (fusion.mode != FusionMode::Independent) {
            merge(t_prev);
            write_back(scene, L, x);
        }
    }
    if (fusion.mode == FusionMode::Independent || plan.empty())
        merge(0);
    return scene;
}

/// Absolute first-channel differences over 6-neighbor pairs of active voxels, in a fixed pair
/// order. A pair straddles a seam when its voxels have different nearest-center crops.
struct PairDifferences {
    std::vector<double> diff;
    std::vector<char> seam;
};

inline PairDifferences pair_differences(const SparseVolume& scene, const CropLayout& L) {
    DIDS_CHECK(scene.mask().same_as(L.mask), "scene volume does not match the layout mask");
    const auto owner = nearest_center_owner(L);
    const auto& coords = L.mask.coords();
    PairDifferences p;
    for (std::size_t r = 0; r < coords.size(); ++r)
        for (const VoxelCoord d : {VoxelCoord{1, 0, 0}, VoxelCoord{0, 1, 0}, VoxelCoord{0, 0, 1}}) {
            const int q = L.mask.find(coords[r] + d);
            if (q < 0)
                continue;
            p.diff.push_back(std::abs(double(scene.at(r, 0)) - double(scene.at(std::size_t(q), 0))));
            p.seam.push_back(owner[r] != owner[std::size_t(q)]);
        }
    return p;
}

struct SeamStats {
    std::size_t seam_pairs = 0, intra_pairs = 0;
    double seam_mean = 0, intra_mean = 0;
    double seam_stderr = 0; // standard error of seam_mean
    double seam_max = 0, intra_p99 = 0;
};

inline SeamStats seam_statistics(const PairDifferences& p) {
    SeamStats s;
    std::vector<double> intra;
    double seam_sq = 0;
    for (std::size_t i = 0; i < p.diff.size(); ++i)
        if (p.seam[i]) {
            ++s.seam_pairs;
            s.seam_mean += p.diff[i];
            seam_sq += p.diff[i] * p.diff[i];
            s.seam_max = std::max(s.seam_max, p.diff[i]);
        } else {
            intra.push_back(p.diff[i]);
            s.intra_mean += p.diff[i];
        }
    s.intra_pairs = intra.size();
    if (s.seam_pairs) {
        const double n = double(s.seam_pairs);
        s.seam_mean /= n;
        if (s.seam_pairs > 1)
            s.seam_stderr = std::sqrt(std::max(0.0, (seam_sq - n * s.seam_mean * s.seam_mean) / (n - 1)) / n);
    }
    if (!intra.empty()) {
        s.intra_mean /= double(intra.size());
        const std::size_t at = std::min(intra.size() - 1, std::size_t(0.99 * double(intra.size())));
        std::nth_element(intra.begin(), intra.begin() + std::ptrdiff_t(at), intra.end());
        s.intra_p99 = intra[at];
    }
    return s;
}

inline SeamStats seam_statistics(const SparseVolume& scene, const CropLayout& L) {
    return seam_statistics(pair_differences(scene, L));
}

} // namespace dids
