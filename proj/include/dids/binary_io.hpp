// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/common.hpp>

#include <bit>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

namespace dids::io {

// Little-endian primitive encoding, independent of host byte order.

template <typename T>
void put(std::ostream& os, T value) {
    static_assert(std::is_arithmetic_v<T>);
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    U bits;
    std::memcpy(&bits, &value, sizeof(T));
    char buf[sizeof(T)];
    for (std::size_t b = 0; b < sizeof(T); ++b)
        buf[b] = char((bits >> (8 * b)) & 0xff);
    os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    static_assert(std::is_arithmetic_v<T>);
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T)))
        throw InputError("unexpected end of binary stream");
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
        bits |= U(buf[b]) << (8 * b);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
}

inline void put_magic(std::ostream& os, const std::string& magic) { os.write(magic.data(), std::streamsize(magic.size())); }

inline void expect_magic(std::istream& is, const std::string& magic) {
    std::string got(magic.size(), '\0');
    if (!is.read(got.data(), std::streamsize(got.size())) || got != magic)
        throw InputError("bad file magic, expected " + magic);
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, std::uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_string(std::istream& is) {
    const auto n = get<std::uint32_t>(is);
    if (n > (1u << 20))
        throw InputError("string length out of range");
    std::string s(n, '\0');
    if (!is.read(s.data(), n))
        throw InputError("unexpected end of binary stream");
    return s;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot open for reading: " + path);
    return is;
}

/// FNV-1a over a file's bytes, hex encoded. Used for manifest checksums.
inline std::string file_hash(const std::string& path) {
    auto is = open_in(path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= std::uint8_t(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

} // namespace dids::io
