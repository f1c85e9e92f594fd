#pragma once

// Field sampling: turns any queryable density/radiance field into a
// VoxelGrid. Covers the alpha transform, traceable-volume fitting, the five
// radiance sampling strategies (density only, 18 fixed directions, camera
// average, frustum-visible camera average, degree-3 spherical harmonics).

#include <cmath>
#include <memory>
#include <vector>

#include "voxrpn/grid.hpp"

namespace voxrpn {

// step size used by the density -> opacity transform
constexpr double kAlphaDelta = 0.01;

struct RadianceField {
    virtual ~RadianceField() = default;
    virtual double density_at(Vec3 pos) const = 0;
    virtual Vec3 radiance_at(Vec3 pos, Vec3 dir) const = 0;  // rgb in [0,1]^3
};

inline double density_to_alpha(double sigma) {
    require(sigma >= 0, "density must be non-negative");
    return std::clamp(1.0 - std::exp(-sigma * kAlphaDelta), 0.0, 1.0);
}

// AABB of all camera positions and box corners, grown by margin_fraction of
// its diagonal on every side.
inline Aabb traceable_volume(const std::vector<Camera>& cameras, const std::vector<Obb>& boxes,
                             double margin_fraction) {
    require(!cameras.empty() || !boxes.empty(), "traceable_volume: no cameras or boxes");
    require(margin_fraction >= 0, "traceable_volume: negative margin");
    bool first = true;
    Aabb r{};
    auto grow = [&](Vec3 p) {
        if (first) {
            r = {p, p};
            first = false;
        } else {
            r.min = cwise_min(r.min, p);
            r.max = cwise_max(r.max, p);
        }
    };
    for (const Camera& c : cameras) grow(c.position);
    for (const Obb& b : boxes)
        for (const Vec3& p : obb_corners(b)) grow(p);
    return r.expanded(margin_fraction * r.diagonal());
}

// Longest axis gets target_longest voxels, the others scale proportionally.
inline std::array<int, 3> grid_resolution(const Aabb& volume, int target_longest) {
    require(target_longest > 0, "grid_resolution: target must be positive");
    Vec3 e = volume.extent();
    require(e.x > 0 && e.y > 0 && e.z > 0, "grid_resolution: zero-extent volume");
    double longest = std::max({e.x, e.y, e.z});
    std::array<int, 3> dims;
    for (int a = 0; a < 3; ++a)
        dims[a] = std::max(1, static_cast<int>(std::lround(e[a] / longest * target_longest)));
    return dims;
}

// (cos phi cos theta, cos phi sin theta, sin phi), phi outer over
// {pi/3, 0, -pi/3}, theta inner over k*pi/3
inline std::array<Vec3, 18> fixed_directions() {
    std::array<Vec3, 18> out;
    const double phis[3] = {kPi / 3, 0.0, -kPi / 3};
    int n = 0;
    for (double phi : phis)
        for (int k = 0; k < 6; ++k) {
            double theta = k * kPi / 3;
            out[n++] = {std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta),
                        std::sin(phi)};
        }
    return out;
}

// deterministic near-uniform sphere covering (golden-angle spiral)
inline std::vector<Vec3> fibonacci_sphere(int n) {
    require(n >= 1, "fibonacci_sphere: need at least one direction");
    std::vector<Vec3> out(n);
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        double z = 1.0 - (2.0 * i + 1.0) / n;
        double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        double t = golden * i;
        out[i] = {r * std::cos(t), r * std::sin(t), z};
    }
    return out;
}

// Real spherical harmonics through degree 3, orthonormal over the sphere;
// dir must be unit length. Order: (l,m) = (0,0), (1,-1), (1,0), (1,1),
// (2,-2) ... (3,3).
inline std::array<double, 16> sh_basis(Vec3 d) {
    double x = d.x, y = d.y, z = d.z;
    double xx = x * x, yy = y * y, zz = z * z;
    return {
        0.28209479177387814,
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (3.0 * zz - 1.0),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        -0.5900435899266435 * y * (3.0 * xx - yy),
        2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4.0 * zz - xx - yy),
        0.3731763325901154 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        -0.4570457994644658 * x * (4.0 * zz - xx - yy),
        1.445305721320277 * z * (xx - yy),
        -0.5900435899266435 * x * (xx - 3.0 * yy),
    };
}

struct ShCoeffs {
    std::array<std::array<double, 16>, 3> k{};  // per color channel

    Vec3 eval(Vec3 dir) const {
        auto b = sh_basis(dir);
        Vec3 rgb{};
        for (int i = 0; i < 16; ++i) {
            rgb.x += k[0][i] * b[i];
            rgb.y += k[1][i] * b[i];
            rgb.z += k[2][i] * b[i];
        }
        return rgb;
    }
};

namespace detail {

// Cholesky factor/solve for small SPD systems, in place.
template <int N>
struct Cholesky {
    std::array<double, N * N> L{};

    explicit Cholesky(const std::array<double, N * N>& A) {
        for (int i = 0; i < N; ++i) {
            for (int j = 0; j <= i; ++j) {
                double s = A[i * N + j];
                for (int k = 0; k < j; ++k) s -= L[i * N + k] * L[j * N + k];
                if (i == j) {
                    if (s <= 0) throw std::runtime_error("cholesky: system not positive definite");
                    L[i * N + i] = std::sqrt(s);
                } else {
                    L[i * N + j] = s / L[j * N + j];
                }
            }
        }
    }

    std::array<double, N> solve(std::array<double, N> b) const {
        for (int i = 0; i < N; ++i) {
            for (int k = 0; k < i; ++k) b[i] -= L[i * N + k] * b[k];
            b[i] /= L[i * N + i];
        }
        for (int i = N - 1; i >= 0; --i) {
            for (int k = i + 1; k < N; ++k) b[i] -= L[k * N + i] * b[k];
            b[i] /= L[i * N + i];
        }
        return b;
    }
};

}  // namespace detail

// Least-squares SH fit of the radiance at one position over a Fibonacci
// direction set, via the 16x16 normal equations.
inline ShCoeffs fit_sh(const RadianceField& field, Vec3 pos, int n_dirs = 300) {
    require(n_dirs >= 16, "fit_sh: need at least 16 directions");
    auto dirs = fibonacci_sphere(n_dirs);
    std::array<double, 16 * 16> ata{};
    std::array<std::array<double, 16>, 3> atb{};
    for (const Vec3& d : dirs) {
        auto b = sh_basis(d);
        Vec3 rgb = field.radiance_at(pos, d);
        for (int i = 0; i < 16; ++i) {
            for (int j = 0; j <= i; ++j) ata[i * 16 + j] += b[i] * b[j];
            atb[0][i] += b[i] * rgb.x;
            atb[1][i] += b[i] * rgb.y;
            atb[2][i] += b[i] * rgb.z;
        }
    }
    for (int i = 0; i < 16; ++i)
        for (int j = i + 1; j < 16; ++j) ata[i * 16 + j] = ata[j * 16 + i];
    detail::Cholesky<16> chol(ata);
    ShCoeffs out;
    for (int c = 0; c < 3; ++c) out.k[c] = chol.solve(atb[c]);
    return out;
}

struct SamplingStrategy {
    enum class Kind { DensityOnly, Fixed18, CameraAvg, FrustumAvg, Sh3 };
    Kind kind = Kind::DensityOnly;
    std::vector<Camera> cameras;  // CameraAvg / FrustumAvg
    int sh_dirs = 300;

    int channels() const {
        switch (kind) {
            case Kind::DensityOnly: return 1;
            case Kind::Sh3: return 49;
            default: return 4;
        }
    }
};

// Mean radiance at pos over the strategy's direction set. FrustumAvg uses
// only cameras whose frustum contains pos and falls back to the plain camera
// average when none does.
inline Vec3 average_radiance(const RadianceField& field, Vec3 pos, const SamplingStrategy& s) {
    using Kind = SamplingStrategy::Kind;
    require(s.kind == Kind::Fixed18 || s.kind == Kind::CameraAvg || s.kind == Kind::FrustumAvg,
            "average_radiance: strategy has no direction set");
    if (s.kind == Kind::Fixed18) {
        Vec3 acc{};
        for (const Vec3& d : fixed_directions()) acc += field.radiance_at(pos, d);
        return acc / 18.0;
    }
    require(!s.cameras.empty(), "average_radiance: camera strategy without cameras");
    Vec3 acc{};
    int n = 0;
    if (s.kind == Kind::FrustumAvg) {
        for (const Camera& c : s.cameras) {
            if (!c.sees(pos)) continue;
            acc += field.radiance_at(pos, (pos - c.position).normalized());
            ++n;
        }
    }
    if (n == 0) {  // CameraAvg, or no frustum contains the point
        for (const Camera& c : s.cameras) {
            acc += field.radiance_at(pos, (pos - c.position).normalized());
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

// Uniform lattice of voxel centers inside the volume; channel 0 alpha,
// radiance channels per strategy (rgb mean, or 16 SH coefficients per color
// channel laid out as 1 + c*16 + basis).
inline VoxelGrid sample_grid(const RadianceField& field, const Aabb& volume,
                             std::array<int, 3> dims, const SamplingStrategy& strategy) {
    using Kind = SamplingStrategy::Kind;
    Vec3 e = volume.extent();
    require(e.x > 0 && e.y > 0 && e.z > 0, "sample_grid: zero-extent volume");
    double spacing = 0;
    for (int a = 0; a < 3; ++a) {
        require(dims[a] > 0, "sample_grid: dims must be positive");
        spacing = std::max(spacing, e[a] / dims[a]);
    }
    for (int a = 0; a < 3; ++a)
        require(spacing * (dims[a] - 1) <= e[a],
                "sample_grid: dims out of proportion with the volume");
    Vec3 origin = volume.min + Vec3{(e.x - spacing * (dims[0] - 1)) / 2,
                                    (e.y - spacing * (dims[1] - 1)) / 2,
                                    (e.z - spacing * (dims[2] - 1)) / 2};
    VoxelGrid g(dims[0], dims[1], dims[2], strategy.channels(), spacing, origin);
    for (int k = 0; k < g.H(); ++k)
        for (int j = 0; j < g.L(); ++j)
            for (int i = 0; i < g.W(); ++i) {
                Vec3 p = g.voxel_center(i, j, k);
                g.at(0, i, j, k) = static_cast<float>(density_to_alpha(field.density_at(p)));
                if (strategy.kind == Kind::DensityOnly) continue;
                if (strategy.kind == Kind::Sh3) {
                    ShCoeffs sh = fit_sh(field, p, strategy.sh_dirs);
                    for (int c = 0; c < 3; ++c)
                        for (int b = 0; b < 16; ++b)
                            g.at(1 + c * 16 + b, i, j, k) = static_cast<float>(sh.k[c][b]);
                } else {
                    Vec3 rgb = average_radiance(field, p, strategy);
                    g.at(1, i, j, k) = static_cast<float>(rgb.x);
                    g.at(2, i, j, k) = static_cast<float>(rgb.y);
                    g.at(3, i, j, k) = static_cast<float>(rgb.z);
                }
            }
    return g;
}

}  // namespace voxrpn
