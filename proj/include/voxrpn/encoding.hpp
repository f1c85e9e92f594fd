// Anchor generation, box parameterizations (anchor deltas, per-voxel distance
// targets with centerness, roi offsets) and the two label assignment schemes.
// Everything works in grid coordinates: distances in voxel units, base-grid
// voxel centers at integer positions. decode_* are templated on the scalar so
// dual numbers can flow through them for gradient checks and IoU losses.
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <set>
#include <vector>

#include "voxrpn/geometry.hpp"
#include "voxrpn/grid.hpp"

namespace voxrpn {

// one pyramid level: feature dims + stride relative to the base grid
struct LevelLayout {
    int stride = 1;
    int W = 0, L = 0, H = 0;
    size_t voxels() const { return size_t(W) * size_t(L) * size_t(H); }
    size_t flat(int i, int j, int k) const {
        return (size_t(k) * size_t(L) + size_t(j)) * size_t(W) + size_t(i);
    }
};

// center of the base-grid cell block covered by feature voxel (i,j,k)
inline Vec3 level_position(const LevelLayout& lv, int i, int j, int k) {
    double s = lv.stride;
    return {(i + 0.5) * s - 0.5, (j + 0.5) * s - 0.5, (k + 0.5) * s - 0.5};
}

// every voxel position, flattened level-major then in grid index order (the
// same order the per-voxel assigner and the head outputs use)
inline std::vector<Vec3> pyramid_positions(const std::vector<LevelLayout>& levels) {
    size_t total = 0;
    for (const LevelLayout& lv : levels) total += lv.voxels();
    std::vector<Vec3> out;
    out.reserve(total);
    for (const LevelLayout& lv : levels)
        for (int k = 0; k < lv.H; ++k)
            for (int j = 0; j < lv.L; ++j)
                for (int i = 0; i < lv.W; ++i) out.push_back(level_position(lv, i, j, k));
    return out;
}

inline Obb box_world_to_grid(const Obb& b, const VoxelGrid& g) {
    Vec3 o{g.origin()[0], g.origin()[1], g.origin()[2]};
    return Obb((b.center - o) * (1.0 / g.spacing()), b.size * (1.0 / g.spacing()), b.yaw);
}

inline Obb box_grid_to_world(const Obb& b, const VoxelGrid& g) {
    Vec3 o{g.origin()[0], g.origin()[1], g.origin()[2]};
    return Obb(b.center * g.spacing() + o, b.size * g.spacing(), b.yaw);
}

struct Anchor {
    Vec3 center;
    Vec3 size;
    int level = 0;
};

// the 5 ratio families expanded by permutation, deduplicated
inline std::vector<std::array<int, 3>> default_anchor_ratios() {
    const std::array<std::array<int, 3>, 5> families = {
        {{1, 1, 1}, {1, 1, 2}, {1, 1, 3}, {2, 2, 1}, {3, 3, 1}}};
    std::set<std::array<int, 3>> uniq;
    for (std::array<int, 3> f : families) {
        std::sort(f.begin(), f.end());
        do uniq.insert(f);
        while (std::next_permutation(f.begin(), f.end()));
    }
    std::vector<std::array<int, 3>> out(uniq.begin(), uniq.end());
    require(out.size() == 13, "anchor ratios: expansion must yield 13 distinct ratios");
    return out;
}

// Per level: one anchor per (ratio, voxel), ratio-major so that anchor index
// a*W*L*H + flat(i,j,k) lines up with channel-major head outputs. The anchor
// whose ratio component is smallest gets exactly the level's shortest side.
inline std::vector<std::vector<Anchor>> generate_anchors(
    const std::vector<LevelLayout>& levels, const std::vector<double>& shortest_sides,
    const std::vector<std::array<int, 3>>& ratios) {
    require(levels.size() == shortest_sides.size(), "generate_anchors: one side per level");
    require(!ratios.empty(), "generate_anchors: no ratios");
    std::set<std::array<int, 3>> uniq;
    for (const auto& r : ratios) {
        require(r[0] > 0 && r[1] > 0 && r[2] > 0, "generate_anchors: ratio components positive");
        uniq.insert(r);
    }
    std::vector<std::array<int, 3>> rs(uniq.begin(), uniq.end());
    std::vector<std::vector<Anchor>> out(levels.size());
    for (size_t lv = 0; lv < levels.size(); ++lv) {
        const LevelLayout& L = levels[lv];
        require(L.W > 0 && L.L > 0 && L.H > 0 && L.stride > 0, "generate_anchors: bad layout");
        require(shortest_sides[lv] > 0, "generate_anchors: side must be positive");
        out[lv].reserve(rs.size() * L.voxels());
        for (const auto& r : rs) {
            double m = double(std::min({r[0], r[1], r[2]}));
            Vec3 size{shortest_sides[lv] * r[0] / m, shortest_sides[lv] * r[1] / m,
                      shortest_sides[lv] * r[2] / m};
            for (int k = 0; k < L.H; ++k)
                for (int j = 0; j < L.L; ++j)
                    for (int i = 0; i < L.W; ++i)
                        out[lv].push_back({level_position(L, i, j, k), size, int(lv)});
        }
    }
    return out;
}

inline std::vector<Anchor> flatten_anchor_levels(const std::vector<std::vector<Anchor>>& sets) {
    size_t total = 0;
    for (const auto& s : sets) total += s.size();
    std::vector<Anchor> out;
    out.reserve(total);
    for (const auto& s : sets) out.insert(out.end(), s.begin(), s.end());
    return out;
}

// shortest anchor side per level, default 3 voxels of that level's stride
inline std::vector<double> anchor_shortest_sides(const std::vector<LevelLayout>& levels,
                                                 const std::vector<double>& given) {
    if (!given.empty()) {
        require(given.size() == levels.size(), "anchors: one shortest side per pyramid level");
        return given;
    }
    std::vector<double> out;
    for (const LevelLayout& lv : levels) out.push_back(3.0 * lv.stride);
    return out;
}

// Midpoint-offset vertices of a footprint. Upmost = max y, rightmost = max x;
// exact ties (axis-aligned boxes) resolve to the larger other coordinate, so
// an axis-aligned box encodes to offsets (+w/2, +l/2).
inline Vec2 upmost_vertex(const std::array<Vec2, 4>& fp) {
    Vec2 best = fp[0];
    for (const Vec2& p : fp)
        if (p.y > best.y || (p.y == best.y && p.x > best.x)) best = p;
    return best;
}

inline Vec2 rightmost_vertex(const std::array<Vec2, 4>& fp) {
    Vec2 best = fp[0];
    for (const Vec2& p : fp)
        if (p.x > best.x || (p.x == best.x && p.y > best.y)) best = p;
    return best;
}

// Rebuild a footprint rectangle from its xy AABB (center cx,cy, extents w,l)
// and the midpoint offsets (da, db) of the upmost/rightmost vertices relative
// to the AABB center. The four vertices form a point-symmetric quad that gets
// rectified; a quad whose area collapses (the axis-aligned tie-break emits
// da=w/2, db=l/2, which pinches the quad into a segment) falls back to the
// AABB itself.
template <class T>
RectT<T> rect_from_midpoint_offsets(T cx, T cy, T w, T l, T da, T db) {
    T area = T(4) * da * db - w * l;
    area = (area < T(0) ? -area : area) * T(0.5);
    if (value_of(area) < 1e-7 * value_of(w) * value_of(l)) return RectT<T>{{cx, cy}, w, l, T(0)};
    std::array<std::array<T, 2>, 4> v;
    v[0] = {cx + da, cy + l * T(0.5)};
    v[1] = {cx + w * T(0.5), cy + db};
    v[2] = {cx - da, cy - l * T(0.5)};
    v[3] = {cx - w * T(0.5), cy - db};
    return rectify_quad(v);
}

struct AnchorDelta {
    // t_x, t_y, t_z, t_w, t_l, t_h, t_alpha, t_beta
    std::array<double, 8> t{};
};

inline AnchorDelta encode_anchor(const Obb& gt, const Anchor& a) {
    Aabb bb = obb_to_aabb(gt);
    double x = 0.5 * (bb.min.x + bb.max.x), y = 0.5 * (bb.min.y + bb.max.y);
    double w = bb.max.x - bb.min.x, l = bb.max.y - bb.min.y;
    auto fp = obb_footprint(gt);
    AnchorDelta d;
    d.t = {(x - a.center.x) / a.size.x,
           (y - a.center.y) / a.size.y,
           (gt.center.z - a.center.z) / a.size.z,
           std::log(w / a.size.x),
           std::log(l / a.size.y),
           std::log(gt.size.z / a.size.z),
           (upmost_vertex(fp).x - x) / w,
           (rightmost_vertex(fp).y - y) / l};
    return d;
}

template <class T>
ObbT<T> decode_anchor_t(const std::array<T, 8>& t, const Anchor& a, bool* clamped = nullptr) {
    using std::exp;
    auto safe_exp = [&](T e) {
        if (value_of(e) > 20.0 || value_of(e) < -20.0) {
            if (clamped) *clamped = true;
            return exp(T(value_of(e) > 0 ? 20.0 : -20.0));
        }
        return exp(e);
    };
    T cx = t[0] * T(a.size.x) + T(a.center.x);
    T cy = t[1] * T(a.size.y) + T(a.center.y);
    T cz = t[2] * T(a.size.z) + T(a.center.z);
    T w = safe_exp(t[3]) * T(a.size.x);
    T l = safe_exp(t[4]) * T(a.size.y);
    T h = safe_exp(t[5]) * T(a.size.z);
    RectT<T> r = rect_from_midpoint_offsets(cx, cy, w, l, t[6] * w, t[7] * l);
    return ObbT<T>{{r.center[0], r.center[1], cz}, {r.w, r.l, h}, r.yaw};
}

inline Obb decode_anchor(const AnchorDelta& d, const Anchor& a, bool* clamped = nullptr) {
    ObbT<double> b = decode_anchor_t(d.t, a, clamped);
    return Obb({b.center[0], b.center[1], b.center[2]}, {b.size[0], b.size[1], b.size[2]}, b.yaw);
}

struct FcosTarget {
    // x0*, y0*, z0*, x1*, y1*, z1*, dalpha*, dbeta*
    std::array<double, 8> t{};
    double cstar = 0;
    int label = 0;
    int gt_index = -1;
};

inline FcosTarget encode_fcos(const Vec3& pos, const Obb& gt) {
    Aabb bb = obb_to_aabb(gt);
    require(bb.contains(pos), "fcos encode: position outside the box AABB");
    double x0 = pos.x - bb.min.x, x1 = bb.max.x - pos.x;
    double y0 = pos.y - bb.min.y, y1 = bb.max.y - pos.y;
    double z0 = pos.z - bb.min.z, z1 = bb.max.z - pos.z;
    auto fp = obb_footprint(gt);
    FcosTarget r;
    r.t = {x0, y0, z0, x1, y1, z1, upmost_vertex(fp).x - pos.x, rightmost_vertex(fp).y - pos.y};
    auto ratio = [](double a, double b) { return std::min(a, b) / std::max(a, b); };
    r.cstar = std::sqrt(ratio(x0, x1) * ratio(y0, y1) * ratio(z0, z1));
    r.label = 1;
    return r;
}

// distances below 1e-4 voxel are clamped so sizes stay positive
template <class T>
ObbT<T> decode_fcos_t(const Vec3& pos, const std::array<T, 8>& t) {
    auto clamp_d = [](T d) { return value_of(d) < 1e-4 ? T(1e-4) : d; };
    T x0 = clamp_d(t[0]), y0 = clamp_d(t[1]), z0 = clamp_d(t[2]);
    T x1 = clamp_d(t[3]), y1 = clamp_d(t[4]), z1 = clamp_d(t[5]);
    T cx = T(pos.x) + (x1 - x0) * T(0.5);
    T cy = T(pos.y) + (y1 - y0) * T(0.5);
    T cz = T(pos.z) + (z1 - z0) * T(0.5);
    T w = x0 + x1, l = y0 + y1, h = z0 + z1;
    // offsets are relative to the voxel, the quad wants them center-relative
    T da = T(pos.x) + t[6] - cx;
    T db = T(pos.y) + t[7] - cy;
    RectT<T> r = rect_from_midpoint_offsets(cx, cy, w, l, da, db);
    return ObbT<T>{{r.center[0], r.center[1], cz}, {r.w, r.l, h}, r.yaw};
}

inline Obb decode_fcos(const Vec3& pos, const std::array<double, 8>& t) {
    ObbT<double> b = decode_fcos_t(pos, t);
    return Obb({b.center[0], b.center[1], b.center[2]}, {b.size[0], b.size[1], b.size[2]}, b.yaw);
}

// max-regression-distance window per level: (0,16], (16,32], ..., last open
inline std::vector<std::pair<double, double>> default_fcos_ranges(size_t n_levels) {
    require(n_levels > 0, "fcos ranges: need at least one level");
    std::vector<std::pair<double, double>> out;
    double lo = 0, hi = 16;
    for (size_t i = 0; i < n_levels; ++i) {
        out.push_back({lo, i + 1 == n_levels ? std::numeric_limits<double>::infinity() : hi});
        lo = hi;
        hi *= 2;
    }
    return out;
}

// Per-voxel targets over the whole pyramid, flattened level-major then in
// grid index order. A voxel is positive when it lies strictly inside a GT
// AABB, within center_radius*stride of the GT center in every axis, and the
// max regression distance falls in the level's window. Overlaps go to the
// smallest-volume GT.
inline std::vector<FcosTarget> assign_fcos(const std::vector<LevelLayout>& levels,
                                           const std::vector<Obb>& gts,
                                           double center_radius = 1.5,
                                           std::vector<std::pair<double, double>> ranges = {}) {
    if (ranges.empty()) ranges = default_fcos_ranges(levels.size());
    require(ranges.size() == levels.size(), "assign_fcos: one range per level");
    std::vector<Aabb> bbs;
    for (const Obb& g : gts) bbs.push_back(obb_to_aabb(g));
    size_t total = 0;
    for (const LevelLayout& lv : levels) total += lv.voxels();
    std::vector<FcosTarget> out;
    out.reserve(total);
    for (size_t lv = 0; lv < levels.size(); ++lv) {
        const LevelLayout& L = levels[lv];
        double radius = center_radius * L.stride;
        auto [lo, hi] = ranges[lv];
        for (int k = 0; k < L.H; ++k)
            for (int j = 0; j < L.L; ++j)
                for (int i = 0; i < L.W; ++i) {
                    Vec3 p = level_position(L, i, j, k);
                    int best = -1;
                    double best_vol = 0;
                    for (size_t g = 0; g < gts.size(); ++g) {
                        const Aabb& bb = bbs[g];
                        if (!(p.x > bb.min.x && p.x < bb.max.x && p.y > bb.min.y &&
                              p.y < bb.max.y && p.z > bb.min.z && p.z < bb.max.z))
                            continue;
                        Vec3 c = bb.center();
                        if (std::abs(p.x - c.x) > radius || std::abs(p.y - c.y) > radius ||
                            std::abs(p.z - c.z) > radius)
                            continue;
                        Vec3 lo3 = p - bb.min, hi3 = bb.max - p;
                        double m = std::max({lo3.x, lo3.y, lo3.z, hi3.x, hi3.y, hi3.z});
                        if (!(m > lo && m <= hi)) continue;
                        double vol = gts[g].volume();
                        if (best < 0 || vol < best_vol) {
                            best = int(g);
                            best_vol = vol;
                        }
                    }
                    if (best < 0) {
                        out.emplace_back();
                    } else {
                        FcosTarget t = encode_fcos(p, gts[size_t(best)]);
                        t.gt_index = best;
                        out.push_back(t);
                    }
                }
    }
    return out;
}

struct AssignmentResult {
    std::vector<int8_t> label;      // 1 positive, 0 negative, -1 ignore
    std::vector<int32_t> gt_index;  // -1 unless positive
};

// Positive above pos_thresh with any GT or as the best anchor of some GT,
// negative when every IoU is below neg_thresh, ignored otherwise. Anchors
// whose AABB misses a GT AABB have exactly zero IoU and skip the clip.
inline AssignmentResult assign_anchors(const std::vector<Anchor>& anchors,
                                       const std::vector<Obb>& gts, double pos_thresh = 0.35,
                                       double neg_thresh = 0.2) {
    size_t n = anchors.size();
    AssignmentResult res;
    res.label.assign(n, 0);
    res.gt_index.assign(n, -1);
    std::vector<Aabb> bbs;
    for (const Obb& g : gts) bbs.push_back(obb_to_aabb(g));
    std::vector<double> best_iou(n, 0.0);
    std::vector<int32_t> best_gt(n, -1);
    std::vector<double> gt_best(gts.size(), 0.0);
    std::vector<std::vector<size_t>> gt_best_anchors(gts.size());
    for (size_t i = 0; i < n; ++i) {
        Obb a(anchors[i].center, anchors[i].size, 0.0);
        Aabb abb = obb_to_aabb(a);
        for (size_t g = 0; g < gts.size(); ++g) {
            const Aabb& bb = bbs[g];
            if (abb.min.x >= bb.max.x || abb.max.x <= bb.min.x || abb.min.y >= bb.max.y ||
                abb.max.y <= bb.min.y || abb.min.z >= bb.max.z || abb.max.z <= bb.min.z)
                continue;
            double iou = rotated_iou(a, gts[g]);
            if (iou > best_iou[i]) {
                best_iou[i] = iou;
                best_gt[i] = int32_t(g);
            }
            if (iou > gt_best[g]) {
                gt_best[g] = iou;
                gt_best_anchors[g].assign(1, i);
            } else if (iou == gt_best[g] && iou > 0) {
                gt_best_anchors[g].push_back(i);
            }
        }
    }
    for (size_t i = 0; i < n; ++i) {
        if (best_iou[i] > pos_thresh) {
            res.label[i] = 1;
            res.gt_index[i] = best_gt[i];
        } else if (best_iou[i] < neg_thresh) {
            res.label[i] = 0;
        } else {
            res.label[i] = -1;
        }
    }
    // every GT keeps its best-overlap anchors positive regardless of threshold
    for (size_t g = 0; g < gts.size(); ++g)
        for (size_t i : gt_best_anchors[g]) {
            res.label[i] = 1;
            res.gt_index[i] = best_gt[i];
        }
    return res;
}

struct Minibatch {
    std::vector<uint32_t> pos, neg;
};

// up to n*pos_fraction positives (all when fewer), the rest filled with
// negatives, both sampled uniformly without replacement
inline Minibatch sample_minibatch(const AssignmentResult& as, int n, double pos_fraction,
                                  uint64_t seed) {
    require(n > 0 && pos_fraction >= 0 && pos_fraction <= 1, "minibatch: bad size or fraction");
    std::vector<uint32_t> pos, neg;
    for (size_t i = 0; i < as.label.size(); ++i) {
        if (as.label[i] == 1) pos.push_back(uint32_t(i));
        if (as.label[i] == 0) neg.push_back(uint32_t(i));
    }
    if (neg.empty()) throw std::runtime_error("minibatch: scene has no negative anchors");
    size_t want_pos = std::min(pos.size(), size_t(std::llround(n * pos_fraction)));
    size_t want_neg = std::min(neg.size(), size_t(n) - want_pos);
    Rng rng(seed);
    Minibatch out;
    for (size_t i : rng.sample_without_replacement(pos.size(), want_pos)) out.pos.push_back(pos[i]);
    for (size_t i : rng.sample_without_replacement(neg.size(), want_neg)) out.neg.push_back(neg[i]);
    return out;
}

struct RoiOffset {
    // g_x, g_y, g_z, g_w, g_l, g_h, g_theta
    std::array<double, 7> g{};
};

// center offset expressed in the roi frame, log size ratios, yaw delta
// canonicalized to [-pi, pi) and normalized by 2*pi
inline RoiOffset encode_roi(const Obb& gt, const Obb& roi) {
    double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
    Vec3 d = gt.center - roi.center;
    RoiOffset r;
    r.g = {(d.x * c + d.y * s) / roi.size.x,
           (d.y * c - d.x * s) / roi.size.y,
           d.z / roi.size.z,
           std::log(gt.size.x / roi.size.x),
           std::log(gt.size.y / roi.size.y),
           std::log(gt.size.z / roi.size.z),
           wrap_into(gt.yaw - roi.yaw, 2 * kPi) / (2 * kPi)};
    return r;
}

inline Obb decode_roi(const RoiOffset& r, const Obb& roi) {
    double c = std::cos(roi.yaw), s = std::sin(roi.yaw);
    double ox = r.g[0] * roi.size.x, oy = r.g[1] * roi.size.y;
    Vec3 center{roi.center.x + ox * c - oy * s, roi.center.y + ox * s + oy * c,
                roi.center.z + r.g[2] * roi.size.z};
    Vec3 size{roi.size.x * std::exp(r.g[3]), roi.size.y * std::exp(r.g[4]),
              roi.size.z * std::exp(r.g[5])};
    return Obb(center, size, roi.yaw + r.g[6] * 2 * kPi);
}

// debug dumps, one json record per positive sample

inline void dump_anchor_targets(std::ostream& os, const std::vector<std::vector<Anchor>>& anchors,
                                const AssignmentResult& as, const std::vector<Obb>& gts) {
    size_t total = 0;
    for (const auto& lv : anchors) total += lv.size();
    require(total == as.label.size(), "dump: assignment does not match the anchor set");
    size_t off = 0;
    for (size_t lv = 0; lv < anchors.size(); ++lv) {
        for (size_t i = 0; i < anchors[lv].size(); ++i) {
            size_t gi = off + i;
            if (as.label[gi] != 1) continue;
            AnchorDelta d = encode_anchor(gts[size_t(as.gt_index[gi])], anchors[lv][i]);
            json rec{{"level", lv}, {"index", i}, {"t", d.t}, {"gt_index", as.gt_index[gi]}};
            os << rec.dump() << '\n';
        }
        off += anchors[lv].size();
    }
}

inline void dump_fcos_targets(std::ostream& os, const std::vector<LevelLayout>& levels,
                              const std::vector<FcosTarget>& targets) {
    size_t total = 0;
    for (const LevelLayout& lv : levels) total += lv.voxels();
    require(total == targets.size(), "dump: targets do not match the pyramid");
    size_t off = 0;
    for (size_t lv = 0; lv < levels.size(); ++lv) {
        size_t count = levels[lv].voxels();
        for (size_t i = 0; i < count; ++i) {
            const FcosTarget& t = targets[off + i];
            if (t.label != 1) continue;
            json rec{{"level", lv},
                     {"index", i},
                     {"t", t.t},
                     {"cstar", t.cstar},
                     {"gt_index", t.gt_index}};
            os << rec.dump() << '\n';
        }
        off += count;
    }
}

}  // namespace voxrpn
