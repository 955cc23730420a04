// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/binary_io.hpp>
#include <dids/sparse/volume.hpp>

#include <string>

namespace dids {

// SVOX1 layout (little-endian):
//   "SVOX1" | int32 H, W, L | int32 channels | uint64 count |
//   count x (int32 i, j, k | float32 features[channels])   records sorted by (i, j, k)

inline void write_svox(std::ostream& os, const SparseVolume& v) {
    io::put_magic(os, "SVOX1");
    io::put<std::int32_t>(os, v.extent().h);
    io::put<std::int32_t>(os, v.extent().w);
    io::put<std::int32_t>(os, v.extent().l);
    io::put<std::int32_t>(os, v.channels());
    io::put<std::uint64_t>(os, v.size());
    const auto& coords = v.mask().coords();
    for (std::size_t r = 0; r < coords.size(); ++r) {
        io::put<std::int32_t>(os, coords[r].i);
        io::put<std::int32_t>(os, coords[r].j);
        io::put<std::int32_t>(os, coords[r].k);
        for (float f : v.row(r))
            io::put<float>(os, f);
    }
}

inline SparseVolume read_svox(std::istream& is) {
    io::expect_magic(is, "SVOX1");
    GridExtent e;
    e.h = io::get<std::int32_t>(is);
    e.w = io::get<std::int32_t>(is);
    e.l = io::get<std::int32_t>(is);
    const int channels = io::get<std::int32_t>(is);
    const auto count = io::get<std::uint64_t>(is);
    if (!e.valid() || channels <= 0 || count > std::uint64_t(e.volume()))
        throw InputError("corrupt SVOX1 header");
    std::vector<VoxelCoord> coords(count);
    std::vector<float> data(count * std::size_t(channels));
    for (std::uint64_t r = 0; r < count; ++r) {
        coords[r].i = io::get<std::int32_t>(is);
        coords[r].j = io::get<std::int32_t>(is);
        coords[r].k = io::get<std::int32_t>(is);
        if (!e.contains(coords[r]))
            throw InputError("SVOX1 record outside extent");
        if (r > 0 && !(coords[r - 1] < coords[r]))
            throw InputError("SVOX1 records not strictly sorted");
        for (int c = 0; c < channels; ++c)
            data[r * channels + c] = io::get<float>(is);
    }
    return SparseVolume(OccupancyMask(e, std::move(coords)), channels, std::move(data));
}

inline void save_svox(const std::string& path, const SparseVolume& v) {
    auto os = io::open_out(path);
    write_svox(os, v);
    if (!os)
        throw InputError("write failed: " + path);
}

inline SparseVolume load_svox(const std::string& path) {
    auto is = io::open_in(path);
    return read_svox(is);
}

} // namespace dids
