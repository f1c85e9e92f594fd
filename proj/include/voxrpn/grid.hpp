#pragma once

// Dense multi-channel voxel grid with world placement, plus the NVG1 binary
// format. Channel 0 is always alpha in [0,1]. Data is stored as f32 and the
// placement metadata is quantized to f32 on construction so that a grid in
// memory and its file image carry identical values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "voxrpn/geometry.hpp"

namespace voxrpn {

static_assert(std::endian::native == std::endian::little, "NVG1 io assumes a little-endian host");

class VoxelGrid {
public:
    VoxelGrid() = default;
    VoxelGrid(int W, int L, int H, int C, double spacing, Vec3 origin)
        : W_(W), L_(L), H_(H), C_(C) {
        require(W > 0 && L > 0 && H > 0, "grid dims must be positive");
        require(C >= 1, "grid needs at least the alpha channel");
        require(spacing > 0, "grid spacing must be positive");
        spacing_ = static_cast<float>(spacing);
        origin_ = {static_cast<float>(origin.x), static_cast<float>(origin.y),
                   static_cast<float>(origin.z)};
        data_.assign(static_cast<size_t>(C) * W * L * H, 0.0f);
    }

    int W() const { return W_; }
    int L() const { return L_; }
    int H() const { return H_; }
    int C() const { return C_; }
    double spacing() const { return spacing_; }
    Vec3 origin() const { return {origin_[0], origin_[1], origin_[2]}; }

    size_t voxel_count() const { return static_cast<size_t>(W_) * L_ * H_; }
    size_t value_count() const { return data_.size(); }

    size_t index(int c, int i, int j, int k) const {
        return ((static_cast<size_t>(c) * H_ + k) * L_ + j) * W_ + i;
    }
    float at(int c, int i, int j, int k) const { return data_[index(c, i, j, k)]; }
    float& at(int c, int i, int j, int k) { return data_[index(c, i, j, k)]; }
    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    Vec3 voxel_center(int i, int j, int k) const {
        return origin() + Vec3{static_cast<double>(i), static_cast<double>(j),
                               static_cast<double>(k)} *
                              spacing_;
    }

    // world extent covered by the voxel cells (half a cell beyond the centers)
    Aabb bounds() const {
        double h = 0.5 * spacing_;
        Vec3 lo = voxel_center(0, 0, 0) - Vec3{h, h, h};
        Vec3 hi = voxel_center(W_ - 1, L_ - 1, H_ - 1) + Vec3{h, h, h};
        return {lo, hi};
    }

    bool operator==(const VoxelGrid&) const = default;

private:
    int W_ = 0, L_ = 0, H_ = 0, C_ = 0;
    float spacing_ = 1.0f;
    std::array<float, 3> origin_{0, 0, 0};
    std::vector<float> data_;
};

namespace detail {
template <class T>
void write_raw(std::ostream& os, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(buf, sizeof(T));
}
template <class T>
T read_raw(std::istream& is, const char* what) {
    char buf[sizeof(T)];
    is.read(buf, sizeof(T));
    require(static_cast<bool>(is), std::string("nvg: truncated reading ") + what);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}
}  // namespace detail

inline void save_nvg(const VoxelGrid& g, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("NVG1", 4);
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(g.W()));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(g.L()));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(g.H()));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(g.C()));
    detail::write_raw<float>(os, static_cast<float>(g.spacing()));
    Vec3 o = g.origin();
    detail::write_raw<float>(os, static_cast<float>(o.x));
    detail::write_raw<float>(os, static_cast<float>(o.y));
    detail::write_raw<float>(os, static_cast<float>(o.z));
    os.write(reinterpret_cast<const char*>(g.data().data()),
             static_cast<std::streamsize>(g.data().size() * sizeof(float)));
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline VoxelGrid load_nvg(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    require(static_cast<bool>(is) && std::memcmp(magic, "NVG1", 4) == 0,
            "nvg: bad magic in " + path);
    uint32_t W = detail::read_raw<uint32_t>(is, "W");
    uint32_t L = detail::read_raw<uint32_t>(is, "L");
    uint32_t H = detail::read_raw<uint32_t>(is, "H");
    uint32_t C = detail::read_raw<uint32_t>(is, "C");
    require(W > 0 && L > 0 && H > 0 && C >= 1, "nvg: invalid dims");
    require(static_cast<uint64_t>(W) * L * H * C < (1ull << 32), "nvg: grid too large");
    float spacing = detail::read_raw<float>(is, "spacing");
    float ox = detail::read_raw<float>(is, "origin");
    float oy = detail::read_raw<float>(is, "origin");
    float oz = detail::read_raw<float>(is, "origin");
    require(spacing > 0, "nvg: spacing must be positive");
    VoxelGrid g(static_cast<int>(W), static_cast<int>(L), static_cast<int>(H),
                static_cast<int>(C), spacing, Vec3{ox, oy, oz});
    is.read(reinterpret_cast<char*>(g.data().data()),
            static_cast<std::streamsize>(g.data().size() * sizeof(float)));
    require(static_cast<bool>(is) && is.gcount() ==
                static_cast<std::streamsize>(g.data().size() * sizeof(float)),
            "nvg: truncated data in " + path);
    is.peek();
    require(is.eof(), "nvg: trailing bytes in " + path);
    for (size_t v = 0; v < g.voxel_count(); ++v)
        require(g.data()[v] >= 0.0f && g.data()[v] <= 1.0f, "nvg: alpha channel out of [0,1]");
    return g;
}

}  // namespace voxrpn
