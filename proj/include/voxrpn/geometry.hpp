#pragma once

// Rotated-box geometry: Obb/Aabb types, corner enumeration, rotated IoU via
// convex polygon clipping, DIoU penalty, parallelogram rectification, and
// pinhole projection. Everything here is a pure function; the templated
// variants accept dual numbers so decode/projection paths stay differentiable.

#include <algorithm>
#include <cmath>
#include <vector>

#include "json.hpp"
#include "voxrpn/core.hpp"

namespace voxrpn {

// Wrap into [-period/2, period/2). Values already in range pass through
// untouched so canonical inputs stay bit-exact.
inline double wrap_into(double a, double period) {
    double half = 0.5 * period;
    if (a >= -half && a < half) return a;
    double r = std::remainder(a, period);
    if (r >= half) r -= period;
    if (r < -half) r += period;
    return r;
}

// Yaw-rotated box. size = (w,l,h): w along the local x axis, l along local y,
// h along z. Yaw is canonicalized to [-pi/2, pi/2) on construction; a box is
// symmetric under a pi rotation so this loses nothing.
struct Obb {
    Vec3 center{};
    Vec3 size{1, 1, 1};
    double yaw = 0;

    Obb() = default;
    Obb(Vec3 c, Vec3 s, double y) : center(c), size(s), yaw(wrap_into(y, kPi)) {
        require(s.x > 0 && s.y > 0 && s.z > 0, "Obb size must be strictly positive");
    }

    double volume() const { return size.x * size.y * size.z; }

    // Unique representative with yaw in [-pi/4, pi/4); shifting yaw by pi/2
    // swaps the w/l extents. Handy for comparing boxes across encodings.
    Obb canonical_rep() const {
        if (yaw >= -kPi / 4 && yaw < kPi / 4) return *this;
        Obb r = *this;
        r.yaw = yaw >= kPi / 4 ? yaw - kPi / 2 : yaw + kPi / 2;
        r.size = {size.y, size.x, size.z};
        return r;
    }
};

struct Aabb {
    Vec3 min{};
    Vec3 max{};

    Vec3 center() const { return (min + max) * 0.5; }
    Vec3 extent() const { return max - min; }
    double volume() const {
        Vec3 e = extent();
        return e.x * e.y * e.z;
    }
    double diagonal() const { return extent().norm(); }
    bool contains(Vec3 p) const {  // closed on all faces
        return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
               p.z >= min.z && p.z <= max.z;
    }
    Aabb expanded(double m) const { return {min - Vec3{m, m, m}, max + Vec3{m, m, m}}; }
    static Aabb hull(const Aabb& a, const Aabb& b) {
        return {cwise_min(a.min, b.min), cwise_max(a.max, b.max)};
    }
};

// Four ordered xy-plane vertices, counter-clockwise.
struct Quad2d {
    std::array<Vec2, 4> v{};
};

// Pinhole camera; rotation maps world directions into the camera frame.
struct Camera {
    Vec3 position{};
    Mat3 rotation{};
    double focal = 1.0;
    Vec2 principal{};
    std::array<int, 2> image_size{1, 1};

    void validate() const {
        require(focal > 0, "camera focal must be positive");
        require(rotation.orthonormality_error() < 1e-9, "camera rotation must be orthonormal");
        require(image_size[0] > 0 && image_size[1] > 0, "camera image_size must be positive");
    }

    // world -> camera frame (z looks forward)
    Vec3 to_camera(Vec3 p) const { return rotation * (p - position); }

    // frustum test: in front of the camera and projecting inside the image
    bool sees(Vec3 p) const {
        Vec3 c = to_camera(p);
        if (c.z <= 0) return false;
        double u = focal * c.x / c.z + principal.x;
        double v = focal * c.y / c.z + principal.y;
        return u >= 0 && u <= image_size[0] && v >= 0 && v <= image_size[1];
    }

    static Camera look_at(Vec3 position, Vec3 target, double focal, Vec2 principal,
                          std::array<int, 2> image_size, Vec3 up = {0, 0, 1}) {
        Vec3 fwd = (target - position).normalized();
        Vec3 right = fwd.cross(up);
        if (right.norm() < 1e-9) right = fwd.cross(Vec3{0, 1, 0});
        right = right.normalized();
        Vec3 down = fwd.cross(right).normalized();
        Camera c;
        c.position = position;
        c.rotation = Mat3::from_rows(right, down, fwd);
        c.focal = focal;
        c.principal = principal;
        c.image_size = image_size;
        return c;
    }
};

// Corner sign order: all bottom (z-) corners counter-clockwise from (-,-),
// then the top four in the same xy order.
inline constexpr std::array<std::array<int, 3>, 8> kCornerSigns = {{{-1, -1, -1},
                                                                    {+1, -1, -1},
                                                                    {+1, +1, -1},
                                                                    {-1, +1, -1},
                                                                    {-1, -1, +1},
                                                                    {+1, -1, +1},
                                                                    {+1, +1, +1},
                                                                    {-1, +1, +1}}};

template <class T>
struct ObbT {
    std::array<T, 3> center;
    std::array<T, 3> size;
    T yaw;
};

template <class T>
std::array<std::array<T, 3>, 8> obb_corners_t(const ObbT<T>& b) {
    using std::cos;
    using std::sin;
    T c = cos(b.yaw), s = sin(b.yaw);
    T hw = b.size[0] * T(0.5), hl = b.size[1] * T(0.5), hh = b.size[2] * T(0.5);
    std::array<std::array<T, 3>, 8> out;
    for (int i = 0; i < 8; ++i) {
        T lx = T(kCornerSigns[i][0]) * hw;
        T ly = T(kCornerSigns[i][1]) * hl;
        T lz = T(kCornerSigns[i][2]) * hh;
        out[i] = {b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly,
                  b.center[2] + lz};
    }
    return out;
}

inline std::array<Vec3, 8> obb_corners(const Obb& b) {
    ObbT<double> bt{{b.center.x, b.center.y, b.center.z}, {b.size.x, b.size.y, b.size.z}, b.yaw};
    auto cs = obb_corners_t(bt);
    std::array<Vec3, 8> out;
    for (int i = 0; i < 8; ++i) out[i] = {cs[i][0], cs[i][1], cs[i][2]};
    return out;
}

inline Aabb obb_to_aabb(const Obb& b) {
    auto cs = obb_corners(b);
    Aabb r{cs[0], cs[0]};
    for (const Vec3& c : cs) {
        r.min = cwise_min(r.min, c);
        r.max = cwise_max(r.max, c);
    }
    return r;
}

// xy footprint rectangle, counter-clockwise from the local (-,-) corner
inline std::array<Vec2, 4> obb_footprint(const Obb& b) {
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    double hw = 0.5 * b.size.x, hl = 0.5 * b.size.y;
    std::array<Vec2, 4> out;
    const double sx[4] = {-1, 1, 1, -1}, sy[4] = {-1, -1, 1, 1};
    for (int i = 0; i < 4; ++i)
        out[i] = {b.center.x + c * sx[i] * hw - s * sy[i] * hl,
                  b.center.y + s * sx[i] * hw + c * sy[i] * hl};
    return out;
}

inline double polygon_area(const std::vector<Vec2>& p) {  // signed, CCW positive
    double s = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        const Vec2& a = p[i];
        const Vec2& b = p[(i + 1) % p.size()];
        s += a.cross(b);
    }
    return 0.5 * s;
}

// Sutherland-Hodgman: clip a convex CCW polygon against another convex CCW
// polygon. Points within eps of a clip edge count as inside.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> poly, const std::vector<Vec2>& clip,
                                     double eps = 1e-12) {
    for (size_t e = 0; e < clip.size() && !poly.empty(); ++e) {
        Vec2 a = clip[e];
        Vec2 dir = clip[(e + 1) % clip.size()] - a;
        std::vector<Vec2> out;
        out.reserve(poly.size() + 4);
        for (size_t i = 0; i < poly.size(); ++i) {
            const Vec2& p = poly[i];
            const Vec2& q = poly[(i + 1) % poly.size()];
            double dp = dir.cross(p - a);
            double dq = dir.cross(q - a);
            bool pin = dp >= -eps, qin = dq >= -eps;
            if (pin) out.push_back(p);
            if (pin != qin) out.push_back(p + (q - p) * (dp / (dp - dq)));
        }
        poly = std::move(out);
    }
    return poly;
}

// IoU of yaw-rotated boxes: xy intersection by polygon clipping times the
// z-interval overlap, over the union volume.
inline double rotated_iou(const Obb& a, const Obb& b) {
    double dz = std::min(a.center.z + 0.5 * a.size.z, b.center.z + 0.5 * b.size.z) -
                std::max(a.center.z - 0.5 * a.size.z, b.center.z - 0.5 * b.size.z);
    if (dz <= 0) return 0.0;

    auto fa = obb_footprint(a);
    auto fb = obb_footprint(b);
    Vec2 alo = fa[0], ahi = fa[0], blo = fb[0], bhi = fb[0];
    for (int i = 1; i < 4; ++i) {
        alo = {std::min(alo.x, fa[i].x), std::min(alo.y, fa[i].y)};
        ahi = {std::max(ahi.x, fa[i].x), std::max(ahi.y, fa[i].y)};
        blo = {std::min(blo.x, fb[i].x), std::min(blo.y, fb[i].y)};
        bhi = {std::max(bhi.x, fb[i].x), std::max(bhi.y, fb[i].y)};
    }
    if (alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y) return 0.0;

    auto inter = clip_convex({fa.begin(), fa.end()}, {fb.begin(), fb.end()});
    if (inter.size() < 3) return 0.0;
    double vi = std::abs(polygon_area(inter)) * dz;
    double vu = a.volume() + b.volume() - vi;
    return std::clamp(vi / vu, 0.0, 1.0);
}

// closed membership test in the box's local frame
inline bool obb_contains(const Obb& b, Vec3 p) {
    Vec3 d = p - b.center;
    if (std::abs(d.z) > 0.5 * b.size.z) return false;
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    double u = c * d.x + s * d.y;
    double v = -s * d.x + c * d.y;
    return std::abs(u) <= 0.5 * b.size.x && std::abs(v) <= 0.5 * b.size.y;
}

// Squared center distance over the squared diagonal of the axis-aligned box
// enclosing both. diou_loss = 1 - rotated_iou + this.
inline double diou_penalty(const Obb& a, const Obb& b) {
    Vec3 d = a.center - b.center;
    Aabb enc = Aabb::hull(obb_to_aabb(a), obb_to_aabb(b));
    Vec3 g = enc.extent();
    return d.dot(d) / g.dot(g);
}

template <class T>
struct RectT {
    std::array<T, 2> center;
    T w, l, yaw;
};

using Rect2d = RectT<double>;

// Core rectification: replace a parallelogram by the rectangle that shares
// its center and diagonal directions, stretching the shorter diagonal to the
// longer one. No input validation; see rectify_parallelogram for the checked
// front end. Comparisons go through values so the dual-number path picks the
// same branch as a plain evaluation.
template <class T>
RectT<T> rectify_quad(const std::array<std::array<T, 2>, 4>& v) {
    using std::atan2;
    using std::sqrt;
    std::array<T, 2> c = {(v[0][0] + v[1][0] + v[2][0] + v[3][0]) * T(0.25),
                          (v[0][1] + v[1][1] + v[2][1] + v[3][1]) * T(0.25)};
    std::array<T, 2> d1 = {v[0][0] - c[0], v[0][1] - c[1]};
    std::array<T, 2> d2 = {v[1][0] - c[0], v[1][1] - c[1]};
    T n1 = sqrt(d1[0] * d1[0] + d1[1] * d1[1]);
    T n2 = sqrt(d2[0] * d2[0] + d2[1] * d2[1]);
    T half = n1 >= n2 ? n1 : n2;
    std::array<T, 2> u1 = {d1[0] / n1, d1[1] / n1};
    std::array<T, 2> u2 = {d2[0] / n2, d2[1] / n2};
    // corners c + half*u1, c + half*u2, c - half*u1, c - half*u2 form the
    // rectangle; first edge runs corner0 -> corner1
    std::array<T, 2> e1 = {half * (u2[0] - u1[0]), half * (u2[1] - u1[1])};
    std::array<T, 2> e2 = {half * (-u1[0] - u2[0]), half * (-u1[1] - u2[1])};
    RectT<T> r;
    r.center = c;
    r.w = sqrt(e1[0] * e1[0] + e1[1] * e1[1]);
    r.l = sqrt(e2[0] * e2[0] + e2[1] * e2[1]);
    r.yaw = atan2(e1[1], e1[0]);
    if (r.yaw >= T(kPi / 2)) r.yaw -= T(kPi);
    if (r.yaw < T(-kPi / 2)) r.yaw += T(kPi);
    return r;
}

inline Rect2d rectify_parallelogram(const Quad2d& q) {
    Vec2 m02 = (q.v[0] + q.v[2]) * 0.5;
    Vec2 m13 = (q.v[1] + q.v[3]) * 0.5;
    double scale = 0;
    for (const Vec2& p : q.v) scale = std::max(scale, (p - m02).norm());
    require(scale > 0, "rectify: degenerate quad");
    require((m02 - m13).norm() <= 1e-6 * scale, "rectify: quad is not a parallelogram");
    double area = std::abs(polygon_area({q.v.begin(), q.v.end()}));
    require(area > 1e-12 * scale * scale, "rectify: degenerate quad");
    std::array<std::array<double, 2>, 4> v;
    for (int i = 0; i < 4; ++i) v[i] = {q.v[i].x, q.v[i].y};
    return rectify_quad(v);
}

template <class T>
std::array<T, 2> project_point(const Camera& cam, const std::array<T, 3>& p) {
    T x = p[0] - cam.position.x, y = p[1] - cam.position.y, z = p[2] - cam.position.z;
    const auto& R = cam.rotation;
    T xc = R(0, 0) * x + R(0, 1) * y + R(0, 2) * z;
    T yc = R(1, 0) * x + R(1, 1) * y + R(1, 2) * z;
    T zc = R(2, 0) * x + R(2, 1) * y + R(2, 2) * z;
    return {cam.focal * xc / zc + cam.principal.x, cam.focal * yc / zc + cam.principal.y};
}

// Pinhole projection of all 8 corners; every corner must be strictly in
// front of the camera.
inline std::array<Vec2, 8> project_box(const Camera& cam, const Obb& box) {
    cam.validate();
    auto corners = obb_corners(box);
    std::array<Vec2, 8> px;
    for (int i = 0; i < 8; ++i) {
        Vec3 pc = cam.to_camera(corners[i]);
        require(pc.z > 0, "project_box: corner at or behind camera plane");
        auto p = project_point<double>(cam, {corners[i].x, corners[i].y, corners[i].z});
        px[i] = {p[0], p[1]};
    }
    return px;
}

// ---- JSON ----

using json = nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional, const char* what) {
    require(j.is_object(), std::string(what) + ": expected JSON object");
    for (const char* k : required)
        require(j.contains(k), std::string(what) + ": missing key '" + k + "'");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : required) known = known || it.key() == k;
        for (const char* k : optional) known = known || it.key() == k;
        require(known, std::string(what) + ": unknown key '" + it.key() + "'");
    }
}

inline double finite_number(const json& j, const char* what) {
    require(j.is_number(), std::string(what) + ": expected number");
    double v = j.get<double>();
    require(std::isfinite(v), std::string(what) + ": non-finite value");
    return v;
}

inline Vec3 vec3_from_json(const json& j, const char* what) {
    require(j.is_array() && j.size() == 3, std::string(what) + ": expected array of 3 numbers");
    return {finite_number(j[0], what), finite_number(j[1], what), finite_number(j[2], what)};
}

inline json to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

inline json obb_to_json(const Obb& b) {
    return {{"center", to_json(b.center)}, {"size", to_json(b.size)}, {"yaw", b.yaw}};
}

inline Obb obb_from_json(const json& j) {
    check_keys(j, {"center", "size", "yaw"}, {}, "box");
    Vec3 c = vec3_from_json(j["center"], "box.center");
    Vec3 s = vec3_from_json(j["size"], "box.size");
    double yaw = finite_number(j["yaw"], "box.yaw");
    return Obb(c, s, yaw);
}

inline json aabb_to_json(const Aabb& b) {
    return {{"min", to_json(b.min)}, {"max", to_json(b.max)}};
}

inline Aabb aabb_from_json(const json& j) {
    check_keys(j, {"min", "max"}, {}, "aabb");
    Aabb r{vec3_from_json(j["min"], "aabb.min"), vec3_from_json(j["max"], "aabb.max")};
    require(r.min.x <= r.max.x && r.min.y <= r.max.y && r.min.z <= r.max.z,
            "aabb: min must not exceed max");
    return r;
}

inline json camera_to_json(const Camera& c) {
    return {{"position", to_json(c.position)},
            {"rotation", c.rotation.m},
            {"focal", c.focal},
            {"principal", json::array({c.principal.x, c.principal.y})},
            {"image_size", json::array({c.image_size[0], c.image_size[1]})}};
}

inline Camera camera_from_json(const json& j) {
    check_keys(j, {"position", "rotation", "focal", "principal", "image_size"}, {}, "camera");
    Camera c;
    c.position = vec3_from_json(j["position"], "camera.position");
    const json& r = j["rotation"];
    require(r.is_array() && r.size() == 9, "camera.rotation: expected array of 9 numbers");
    for (int i = 0; i < 9; ++i) c.rotation.m[i] = finite_number(r[i], "camera.rotation");
    c.focal = finite_number(j["focal"], "camera.focal");
    const json& p = j["principal"];
    require(p.is_array() && p.size() == 2, "camera.principal: expected array of 2 numbers");
    c.principal = {finite_number(p[0], "camera.principal"), finite_number(p[1], "camera.principal")};
    const json& s = j["image_size"];
    require(s.is_array() && s.size() == 2 && s[0].is_number_integer() && s[1].is_number_integer(),
            "camera.image_size: expected array of 2 integers");
    c.image_size = {s[0].get<int>(), s[1].get<int>()};
    c.validate();
    return c;
}

}  // namespace voxrpn
