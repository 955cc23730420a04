// Copyright Contributors to the dids Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <dids/binary_io.hpp>
#include <dids/common.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dids {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    double operator[](int a) const { return a == 0 ? x : a == 1 ? y : z; }
    double& operator[](int a) { return a == 0 ? x : a == 1 ? y : z; }
    bool operator==(const Vec3&) const = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    return n > 0 ? a / n : Vec3{};
}
inline Vec3 min3(const Vec3& a, const Vec3& b) { return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)}; }
inline Vec3 max3(const Vec3& a, const Vec3& b) { return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)}; }

using Triangle = std::array<int, 3>;

struct TriangleMesh {
    std::vector<Vec3> vertices;     // meters
    std::vector<Triangle> triangles;
    std::vector<Vec3> normals;      // optional, per vertex

    bool empty() const { return triangles.empty(); }

    Vec3 corner(std::size_t t, int c) const { return vertices[std::size_t(triangles[t][c])]; }
    /// Unnormalized face normal (twice the area).
    Vec3 face_cross(std::size_t t) const { return cross(corner(t, 1) - corner(t, 0), corner(t, 2) - corner(t, 0)); }
    double area(std::size_t t) const { return 0.5 * norm(face_cross(t)); }

    /// Throws InputError on out-of-range or repeated indices.
    void validate() const {
        const int n = int(vertices.size());
        for (const auto& t : triangles) {
            for (int i : t)
                DIDS_CHECK(i >= 0 && i < n, "triangle index out of range");
            DIDS_CHECK(t[0] != t[1] && t[1] != t[2] && t[0] != t[2], "degenerate index triple");
        }
    }

    /// Every undirected edge is used an even number of times (closed surface).
    bool is_closed() const {
        std::map<std::pair<int, int>, int> count;
        for (const auto& t : triangles)
            for (int e = 0; e < 3; ++e) {
                int a = t[e], b = t[(e + 1) % 3];
                if (a > b)
                    std::swap(a, b);
                ++count[{a, b}];
            }
        for (const auto& [k, c] : count)
            if (c % 2 != 0)
                return false;
        return true;
    }
};

// ---- OBJ (ASCII) ----

inline void write_obj(std::ostream& os, const TriangleMesh& m) {
    os.precision(9);
    for (const auto& v : m.vertices)
        os << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
    for (const auto& n : m.normals)
        os << "vn " << n.x << ' ' << n.y << ' ' << n.z << '\n';
    for (const auto& t : m.triangles)
        os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

inline TriangleMesh read_obj(std::istream& is) {
    TriangleMesh m;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#')
            continue;
        if (tag == "v" || tag == "vn") {
            Vec3 p;
            if (!(ls >> p.x >> p.y >> p.z))
                throw InputError("malformed OBJ vertex at line " + std::to_string(lineno));
            (tag == "v" ? m.vertices : m.normals).push_back(p);
        } else if (tag == "f") {
            std::vector<int> idx;
            std::string tok;
            while (ls >> tok) {
                const int i = std::stoi(tok.substr(0, tok.find('/')));
                idx.push_back(i < 0 ? int(m.vertices.size()) + i : i - 1);
            }
            if (idx.size() != 3)
                throw InputError("non-triangular OBJ face at line " + std::to_string(lineno));
            m.triangles.push_back({idx[0], idx[1], idx[2]});
        }
    }
    if (!m.normals.empty() && m.normals.size() != m.vertices.size())
        m.normals.clear();
    return m;
}

// ---- PLY (binary little-endian) ----

inline void write_ply(std::ostream& os, const TriangleMesh& m) {
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << m.vertices.size() << "\nproperty float x\nproperty float y\nproperty float z\n";
    os << "element face " << m.triangles.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
    for (const auto& v : m.vertices) {
        io::put<float>(os, float(v.x));
        io::put<float>(os, float(v.y));
        io::put<float>(os, float(v.z));
    }
    for (const auto& t : m.triangles) {
        io::put<std::uint8_t>(os, 3);
        for (int i : t)
            io::put<std::int32_t>(os, i);
    }
}

inline TriangleMesh read_ply(std::istream& is) {
    std::string line;
    std::getline(is, line);
    if (line != "ply")
        throw InputError("not a PLY file");
    std::size_t nv = 0, nf = 0;
    bool binary_le = false;
    int vertex_props = 0;
    std::string current;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string w;
        ls >> w;
        if (w == "format") {
            std::string f;
            ls >> f;
            binary_le = f == "binary_little_endian";
        } else if (w == "element") {
            ls >> current;
            if (current == "vertex")
                ls >> nv;
            else if (current == "face")
                ls >> nf;
        } else if (w == "property" && current == "vertex") {
            std::string type;
            ls >> type;
            if (type != "float")
                throw InputError("only float PLY vertex properties are supported");
            ++vertex_props;
        } else if (w == "end_header") {
            break;
        }
    }
    if (!binary_le || vertex_props < 3)
        throw InputError("unsupported PLY layout (binary little-endian x/y/z required)");
    TriangleMesh m;
    m.vertices.resize(nv);
    for (auto& v : m.vertices) {
        std::vector<double> props(static_cast<std::size_t>(vertex_props));
        for (auto& p : props)
            p = io::get<float>(is);
        v = {props[0], props[1], props[2]};
    }
    for (std::size_t f = 0; f < nf; ++f) {
        const int n = io::get<std::uint8_t>(is);
        if (n != 3)
            throw InputError("non-triangular PLY face");
        Triangle t{};
        for (int& i : t)
            i = io::get<std::int32_t>(is);
        m.triangles.push_back(t);
    }
    return m;
}

/// Loads an OBJ or binary PLY mesh, chosen by extension.
inline TriangleMesh load_mesh(const std::filesystem::path& path) {
    auto in = io::open_in(path);
    const auto ext = path.extension().string();
    TriangleMesh m;
    if (ext == ".obj")
        m = read_obj(in);
    else if (ext == ".ply")
        m = read_ply(in);
    else
        throw InputError("unsupported mesh extension: " + ext);
    if (m.empty())
        throw InputError("mesh has no triangles: " + path.string());
    m.validate();
    return m;
}

inline void save_mesh(const TriangleMesh& m, const std::filesystem::path& path) {
    if (m.empty())
        throw InputError("refusing to save an empty mesh");
    auto out = io::open_out(path);
    const auto ext = path.extension().string();
    if (ext == ".obj")
        write_obj(out, m);
    else if (ext == ".ply")
        write_ply(out, m);
    else
        throw InputError("unsupported mesh extension: " + ext);
}

/// Subdivided icosahedron projected onto a sphere; outward-facing triangles.
inline TriangleMesh make_icosphere(double radius, int subdivisions, Vec3 center = {}) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    TriangleMesh m;
    m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    m.triangles = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                   {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
                   {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
    for (auto& v : m.vertices)
        v = normalized(v);
    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<int, int>, int> mid;
        auto midpoint = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = mid.find(key);
            if (it != mid.end())
                return it->second;
            m.vertices.push_back(normalized((m.vertices[std::size_t(a)] + m.vertices[std::size_t(b)]) * 0.5));
            const int idx = int(m.vertices.size()) - 1;
            mid.emplace(key, idx);
            return idx;
        };
        std::vector<Triangle> next;
        next.reserve(m.triangles.size() * 4);
        for (const auto& tr : m.triangles) {
            const int a = midpoint(tr[0], tr[1]), b = midpoint(tr[1], tr[2]), c = midpoint(tr[2], tr[0]);
            next.push_back({tr[0], a, c});
            next.push_back({tr[1], b, a});
            next.push_back({tr[2], c, b});
            next.push_back({a, b, c});
        }
        m.triangles = std::move(next);
    }
    for (auto& v : m.vertices)
        v = center + v * radius;
    return m;
}

} // namespace dids
