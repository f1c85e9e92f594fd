#pragma once

// Synthetic ground-truth scenes: analytic density fields with box labels and
// cameras, the grid/box training augmentations (flips, quarter turns, small
// yaw jitter), region deletion, and scene JSON persistence.

#include <utility>

#include "voxrpn/field.hpp"

namespace voxrpn {

struct SceneObject {
    Obb box;
    double sigma = 50.0;  // interior density
    double shell = 0.0;   // wall thickness for hollow objects, 0 = solid
};

struct SyntheticScene {
    Aabb room;
    std::vector<SceneObject> objects;
    double ambient_sigma = 0.0;
    std::vector<Camera> cameras;
    uint64_t seed = 0;

    std::vector<Obb> gt_boxes() const {
        std::vector<Obb> out;
        out.reserve(objects.size());
        for (const SceneObject& o : objects) out.push_back(o.box);
        return out;
    }
};

// The field a scene implies: interior sigma inside objects, ambient
// (modulated by seeded band-limited noise) elsewhere. Radiance is a per-object
// albedo with a direction-linear shade, so an SH fit of degree >= 1
// reproduces it exactly.
class SceneField : public RadianceField {
public:
    explicit SceneField(SyntheticScene scene) : scene_(std::move(scene)) {
        Rng rng = Rng(scene_.seed).split(0x5ce9ef1e1d);
        double diag = scene_.room.diagonal();
        for (int m = 0; m < 3; ++m) {
            double az = rng.uniform(0, 2 * kPi), el = rng.uniform(-0.5, 0.5);
            double cycles = rng.uniform(2.0, 5.0);
            noise_k_[m] = Vec3{std::cos(az) * std::cos(el), std::sin(az) * std::cos(el),
                               std::sin(el)} *
                          (2 * kPi * cycles / diag);
            noise_phase_[m] = rng.uniform(0, 2 * kPi);
        }
        for (size_t i = 0; i < scene_.objects.size(); ++i) {
            Rng arng = Rng(scene_.seed).split(0xa1bed0 + i);
            albedo_.push_back({arng.uniform(0.25, 0.85), arng.uniform(0.25, 0.85),
                               arng.uniform(0.25, 0.85)});
        }
    }

    double density_at(Vec3 p) const override {
        double sig = scene_.ambient_sigma;
        if (sig > 0) sig *= 1.0 + 0.5 * noise(p);  // noise in [-1,1], so sig stays >= 0
        for (const SceneObject& o : scene_.objects)
            if (inside_material(o, p)) sig = std::max(sig, o.sigma);
        return sig;
    }

    Vec3 radiance_at(Vec3 p, Vec3 dir) const override {
        Vec3 albedo{0.5, 0.5, 0.5};
        for (size_t i = 0; i < scene_.objects.size(); ++i)
            if (inside_material(scene_.objects[i], p)) {
                albedo = albedo_[i];
                break;
            }
        const double inv_sqrt3 = 0.5773502691896258;
        double shade = 0.6 + 0.4 * (dir.x + dir.y + dir.z) * inv_sqrt3;
        return albedo * shade;
    }

    const SyntheticScene& scene() const { return scene_; }

private:
    static bool inside_material(const SceneObject& o, Vec3 p) {
        if (!obb_contains(o.box, p)) return false;
        if (o.shell <= 0) return true;
        Vec3 cavity = o.box.size - Vec3{2 * o.shell, 2 * o.shell, 2 * o.shell};
        if (cavity.x <= 0 || cavity.y <= 0 || cavity.z <= 0) return true;
        return !obb_contains(Obb(o.box.center, cavity, o.box.yaw), p);
    }

    double noise(Vec3 p) const {  // three low-frequency waves, range [-1,1]
        double s = 0;
        for (int m = 0; m < 3; ++m) s += std::cos(noise_k_[m].dot(p) + noise_phase_[m]);
        return s / 3.0;
    }

    SyntheticScene scene_;
    std::array<Vec3, 3> noise_k_{};
    std::array<double, 3> noise_phase_{};
    std::vector<Vec3> albedo_;
};

struct SynthConfig {
    Vec3 room_size{10, 10, 5};
    int min_objects = 1;
    int max_objects = 4;
    Vec3 min_size{0.8, 0.8, 0.8};
    Vec3 max_size{3.0, 3.0, 2.5};
    double yaw_range = kPi / 2;  // yaw drawn uniformly in [-yaw_range, yaw_range]
    double sigma_min = 30.0;
    double sigma_max = 80.0;
    double ambient_sigma = 0.0;
    bool hollow = false;
    double shell = 0.15;
    int max_place_attempts = 500;

    void validate() const {
        require(room_size.x > 0 && room_size.y > 0 && room_size.z > 0, "synth: room_size > 0");
        require(min_objects >= 1 && max_objects >= min_objects, "synth: bad object count range");
        require(min_size.x > 0 && min_size.y > 0 && min_size.z > 0, "synth: min_size > 0");
        require(max_size.x >= min_size.x && max_size.y >= min_size.y && max_size.z >= min_size.z,
                "synth: size range inverted");
        require(yaw_range >= 0, "synth: yaw_range >= 0");
        require(ambient_sigma >= 0 && sigma_min > ambient_sigma && sigma_max >= sigma_min,
                "synth: density levels must satisfy interior > ambient >= 0");
    }
};

// Rejection-places non-overlapping boxes in the room. Deterministic per seed.
inline SyntheticScene synth_scene(const SynthConfig& cfg, uint64_t seed) {
    cfg.validate();
    SyntheticScene scene;
    scene.room = {{0, 0, 0}, cfg.room_size};
    scene.ambient_sigma = cfg.ambient_sigma;
    scene.seed = seed;
    Rng rng = Rng(seed).split(0x5ce9e);
    int count = cfg.min_objects + static_cast<int>(rng.uniform_int(
                                      static_cast<uint64_t>(cfg.max_objects - cfg.min_objects) + 1));
    for (int n = 0; n < count; ++n) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_place_attempts && !placed; ++attempt) {
            Vec3 size{rng.uniform(cfg.min_size.x, cfg.max_size.x),
                      rng.uniform(cfg.min_size.y, cfg.max_size.y),
                      rng.uniform(cfg.min_size.z, cfg.max_size.z)};
            double yaw = cfg.yaw_range == 0 ? 0.0 : rng.uniform(-cfg.yaw_range, cfg.yaw_range);
            Aabb hull = obb_to_aabb(Obb({0, 0, 0}, size, yaw));
            Vec3 half = hull.extent() * 0.5;
            Vec3 lo = scene.room.min + half, hi = scene.room.max - half;
            if (lo.x > hi.x || lo.y > hi.y || lo.z > hi.z) continue;  // does not fit
            Obb box({rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)},
                    size, yaw);
            bool clear = true;
            for (const SceneObject& o : scene.objects)
                clear = clear && rotated_iou(box, o.box) < 0.05;
            if (!clear) continue;
            SceneObject obj;
            obj.box = box;
            obj.sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
            obj.shell = cfg.hollow ? cfg.shell : 0.0;
            scene.objects.push_back(obj);
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("synth_scene: could not place object " + std::to_string(n) +
                                     " after " + std::to_string(cfg.max_place_attempts) +
                                     " attempts");
    }
    return scene;
}

inline Camera default_scene_camera(Vec3 position, Vec3 target) {
    return Camera::look_at(position, target, 64.0, {32, 32}, {64, 64});
}

// General views uniformly in the room aimed at random interior targets, plus
// close-up views per object at 1.5 box diagonals, clamped into the room.
inline std::vector<Camera> place_cameras(const SyntheticScene& scene, int n_general,
                                         int n_closeup_per_object, uint64_t seed) {
    require(n_general >= 1, "place_cameras: need at least one general view");
    require(n_closeup_per_object >= 0, "place_cameras: negative close-up count");
    Rng rng = Rng(seed).split(0xca3e7a);
    const Aabb& room = scene.room;
    auto room_point = [&] {
        return Vec3{rng.uniform(room.min.x, room.max.x), rng.uniform(room.min.y, room.max.y),
                    rng.uniform(room.min.z, room.max.z)};
    };
    std::vector<Camera> cams;
    for (int i = 0; i < n_general; ++i) {
        Vec3 pos = room_point();
        Vec3 target = room_point();
        while ((target - pos).norm() < 1e-6) target = room_point();
        cams.push_back(default_scene_camera(pos, target));
    }
    for (const SceneObject& o : scene.objects) {
        double dist = 1.5 * o.box.size.norm();
        for (int i = 0; i < n_closeup_per_object; ++i) {
            double z = rng.uniform(-1, 1), az = rng.uniform(0, 2 * kPi);
            double r = std::sqrt(std::max(0.0, 1 - z * z));
            Vec3 pos = o.box.center + Vec3{r * std::cos(az), r * std::sin(az), z} * dist;
            Vec3 inset = room.extent() * 0.01;
            pos = cwise_max(room.min + inset, cwise_min(room.max - inset, pos));
            while ((pos - o.box.center).norm() < 1e-6) pos.z = room.max.z - inset.z;
            cams.push_back(default_scene_camera(pos, o.box.center));
        }
    }
    return cams;
}

// the projection-loss setup: one camera at each top room corner, aimed at the
// room center
inline std::vector<Camera> corner_cameras(const Aabb& room) {
    Vec3 c = room.center();
    std::vector<Camera> cams;
    for (int sx : {0, 1})
        for (int sy : {0, 1}) {
            Vec3 pos{sx ? room.max.x : room.min.x, sy ? room.max.y : room.min.y, room.max.z};
            cams.push_back(default_scene_camera(pos, c));
        }
    return cams;
}

struct AugmentSpec {
    double flip_x_prob = 0.5;
    double flip_y_prob = 0.5;
    double rot90_prob = 0.5;
    double jitter_prob = 0.5;
    double jitter_range = kPi / 18;

    void validate() const {
        for (double p : {flip_x_prob, flip_y_prob, rot90_prob, jitter_prob})
            require(p >= 0 && p <= 1, "augment: probabilities must be in [0,1]");
        require(jitter_range >= 0, "augment: jitter_range >= 0");
    }
};

namespace detail {

inline Vec2 grid_xy_center(const VoxelGrid& g) {
    Vec3 o = g.origin();
    return {o.x + g.spacing() * (g.W() - 1) * 0.5, o.y + g.spacing() * (g.L() - 1) * 0.5};
}

template <class IndexMap>
VoxelGrid permute_grid(const VoxelGrid& g, int W2, int L2, IndexMap&& map) {
    VoxelGrid out(W2, L2, g.H(), g.C(), g.spacing(), g.origin());
    for (int c = 0; c < g.C(); ++c)
        for (int k = 0; k < g.H(); ++k)
            for (int j = 0; j < g.L(); ++j)
                for (int i = 0; i < g.W(); ++i) {
                    auto [i2, j2] = map(i, j);
                    out.at(c, i2, j2, k) = g.at(c, i, j, k);
                }
    return out;
}

}  // namespace detail

inline VoxelGrid flip_x_grid(const VoxelGrid& g) {
    return detail::permute_grid(g, g.W(), g.L(),
                                [&](int i, int j) { return std::pair{g.W() - 1 - i, j}; });
}

inline VoxelGrid flip_y_grid(const VoxelGrid& g) {
    return detail::permute_grid(g, g.W(), g.L(),
                                [&](int i, int j) { return std::pair{i, g.L() - 1 - j}; });
}

// quarter turn: content at (i,j,k) moves to (j, n-1-i, k)
inline VoxelGrid rot90_grid(const VoxelGrid& g) {
    require(g.W() == g.L(), "rot90 needs a square xy footprint");
    return detail::permute_grid(g, g.W(), g.L(),
                                [&](int i, int j) { return std::pair{j, g.W() - 1 - i}; });
}

// In-plane rotation by alpha about the grid's xy center, resampled with
// bilinear interpolation in the slice (z never moves); reads outside the
// grid give 0.
inline VoxelGrid rotate_z_resample(const VoxelGrid& g, double alpha) {
    VoxelGrid out(g.W(), g.L(), g.H(), g.C(), g.spacing(), g.origin());
    double ci = (g.W() - 1) * 0.5, cj = (g.L() - 1) * 0.5;
    double ca = std::cos(alpha), sa = std::sin(alpha);
    for (int c = 0; c < g.C(); ++c)
        for (int k = 0; k < g.H(); ++k)
            for (int j = 0; j < g.L(); ++j)
                for (int i = 0; i < g.W(); ++i) {
                    double di = i - ci, dj = j - cj;
                    double fi = ci + ca * di + sa * dj;  // inverse map
                    double fj = cj - sa * di + ca * dj;
                    int i0 = static_cast<int>(std::floor(fi));
                    int j0 = static_cast<int>(std::floor(fj));
                    double wi = fi - i0, wj = fj - j0;
                    double acc = 0;
                    for (int dj2 = 0; dj2 <= 1; ++dj2)
                        for (int di2 = 0; di2 <= 1; ++di2) {
                            int ii = i0 + di2, jj = j0 + dj2;
                            if (ii < 0 || ii >= g.W() || jj < 0 || jj >= g.L()) continue;
                            double w = (di2 ? wi : 1 - wi) * (dj2 ? wj : 1 - wj);
                            acc += w * g.at(c, ii, jj, k);
                        }
                    out.at(c, i, j, k) = static_cast<float>(acc);
                }
    return out;
}

inline std::pair<VoxelGrid, std::vector<Obb>> augment(const VoxelGrid& grid,
                                                      const std::vector<Obb>& boxes,
                                                      const AugmentSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng = Rng(seed).split(0xa06);
    double u_fx = rng.uniform(), u_fy = rng.uniform(), u_rot = rng.uniform(),
           u_jit = rng.uniform();
    double alpha = rng.uniform(-spec.jitter_range, spec.jitter_range);

    VoxelGrid g = grid;
    std::vector<Obb> bs = boxes;
    Vec2 c = detail::grid_xy_center(g);

    if (u_fx < spec.flip_x_prob) {
        g = flip_x_grid(g);
        for (Obb& b : bs) b = Obb({2 * c.x - b.center.x, b.center.y, b.center.z}, b.size, -b.yaw);
    }
    if (u_fy < spec.flip_y_prob) {
        g = flip_y_grid(g);
        for (Obb& b : bs) b = Obb({b.center.x, 2 * c.y - b.center.y, b.center.z}, b.size, -b.yaw);
    }
    if (u_rot < spec.rot90_prob) {
        g = rot90_grid(g);
        // content map (i,j) -> (j, n-1-i) is the -90 degree turn about the
        // grid center in world space
        for (Obb& b : bs) {
            double dx = b.center.x - c.x, dy = b.center.y - c.y;
            b = Obb({c.x + dy, c.y - dx, b.center.z}, b.size, b.yaw - kPi / 2);
        }
    }
    if (u_jit < spec.jitter_prob && alpha != 0.0) {
        g = rotate_z_resample(g, alpha);
        double ca = std::cos(alpha), sa = std::sin(alpha);
        for (Obb& b : bs) {
            double dx = b.center.x - c.x, dy = b.center.y - c.y;
            b = Obb({c.x + ca * dx - sa * dy, c.y + sa * dx + ca * dy, b.center.z}, b.size,
                    b.yaw + alpha);
        }
    }
    return {std::move(g), std::move(bs)};
}

// zero every channel of voxels whose centers fall inside the box
inline VoxelGrid delete_region(const VoxelGrid& g, const Obb& box) {
    VoxelGrid out = g;
    for (int k = 0; k < g.H(); ++k)
        for (int j = 0; j < g.L(); ++j)
            for (int i = 0; i < g.W(); ++i) {
                if (!obb_contains(box, g.voxel_center(i, j, k))) continue;
                for (int c = 0; c < g.C(); ++c) out.at(c, i, j, k) = 0.0f;
            }
    return out;
}

// ---- scene JSON (version "1") ----

inline json scene_to_json(const SyntheticScene& s) {
    json objs = json::array();
    for (const SceneObject& o : s.objects) {
        json jo = {{"box", obb_to_json(o.box)}, {"sigma", o.sigma}};
        if (o.shell > 0) jo["shell"] = o.shell;
        objs.push_back(jo);
    }
    json cams = json::array();
    for (const Camera& c : s.cameras) cams.push_back(camera_to_json(c));
    return {{"version", "1"},      {"seed", s.seed},       {"room", aabb_to_json(s.room)},
            {"ambient_sigma", s.ambient_sigma}, {"objects", objs}, {"cameras", cams}};
}

inline SyntheticScene scene_from_json(const json& j) {
    check_keys(j, {"version", "seed", "room", "ambient_sigma", "objects", "cameras"}, {},
               "scene");
    require(j["version"].is_string() && j["version"] == "1", "scene: version must be \"1\"");
    SyntheticScene s;
    require(j["seed"].is_number_unsigned() || j["seed"].is_number_integer(),
            "scene: seed must be an integer");
    s.seed = j["seed"].get<uint64_t>();
    s.room = aabb_from_json(j["room"]);
    s.ambient_sigma = finite_number(j["ambient_sigma"], "scene.ambient_sigma");
    require(s.ambient_sigma >= 0, "scene: ambient_sigma must be >= 0");
    require(j["objects"].is_array(), "scene: objects must be an array");
    for (const json& jo : j["objects"]) {
        check_keys(jo, {"box", "sigma"}, {"shell"}, "scene.object");
        SceneObject o;
        o.box = obb_from_json(jo["box"]);
        o.sigma = finite_number(jo["sigma"], "scene.object.sigma");
        require(o.sigma > s.ambient_sigma, "scene: object sigma must exceed ambient");
        if (jo.contains("shell")) {
            o.shell = finite_number(jo["shell"], "scene.object.shell");
            require(o.shell > 0, "scene: shell must be positive when present");
        }
        Aabb hull = obb_to_aabb(o.box);
        Aabb slack = s.room.expanded(1e-9 * (1 + s.room.diagonal()));
        require(slack.contains(hull.min) && slack.contains(hull.max),
                "scene: object outside the room");
        s.objects.push_back(o);
    }
    require(j["cameras"].is_array(), "scene: cameras must be an array");
    for (const json& jc : j["cameras"]) s.cameras.push_back(camera_from_json(jc));
    return s;
}

inline void save_scene(const SyntheticScene& s, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << scene_to_json(s).dump(2) << "\n";
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline SyntheticScene load_scene(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return scene_from_json(json::parse(is));  // parse errors carry byte offsets
}

}  // namespace voxrpn
