#pragma once

// Test-time pipeline: decode every head output into a scored box, filter to
// the scene, keep the per-level top-k, rotated NMS, final top-k. Also rotated
// roi pooling over the feature pyramid and the small refinement stage that
// rescores and nudges pooled proposals.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "voxrpn/encoding.hpp"
#include "voxrpn/losses.hpp"
#include "voxrpn/net.hpp"

namespace voxrpn {

struct Proposal {
    Obb box;  // world coordinates
    double score = 0.0;
    int level = 0;
    std::optional<double> centerness;
};

template <class T>
std::vector<Proposal> decode_all_anchor(const ForwardT<T>& f, const std::vector<Anchor>& anchors,
                                        const VoxelGrid& grid) {
    FlatAnchorOut flat = flatten_anchor_outputs(f);
    require(flat.p.size() == anchors.size(), "decode_all: anchor count mismatch");
    std::vector<size_t> level_end;
    size_t acc = 0;
    size_t per_voxel = anchors.size() / pyramid_positions(f.levels).size();
    for (const LevelLayout& lv : f.levels) level_end.push_back(acc += per_voxel * lv.voxels());
    std::vector<Proposal> out;
    out.reserve(flat.p.size());
    size_t lv = 0;
    for (size_t i = 0; i < flat.p.size(); ++i) {
        while (i >= level_end[lv]) ++lv;
        Obb b = decode_anchor(AnchorDelta{flat.t[i]}, anchors[i]);
        out.push_back({box_grid_to_world(b, grid), flat.p[i], int(lv), std::nullopt});
    }
    return out;
}

template <class T>
std::vector<Proposal> decode_all_fcos(const ForwardT<T>& f, const VoxelGrid& grid,
                                      bool score_mul_centerness = false) {
    FlatFcosOut flat = flatten_fcos_outputs(f);
    std::vector<Vec3> positions = pyramid_positions(f.levels);
    std::vector<size_t> level_end;
    size_t acc = 0;
    for (const LevelLayout& lv : f.levels) level_end.push_back(acc += lv.voxels());
    std::vector<Proposal> out;
    out.reserve(flat.p.size());
    size_t lv = 0;
    for (size_t i = 0; i < flat.p.size(); ++i) {
        while (i >= level_end[lv]) ++lv;
        Obb b = decode_fcos(positions[i], flat.t[i]);
        double s = score_mul_centerness ? flat.p[i] * flat.c[i] : flat.p[i];
        out.push_back({box_grid_to_world(b, grid), s, int(lv), flat.c[i]});
    }
    return out;
}

// keep proposals whose center lies inside the scene box, boundary included
inline std::vector<Proposal> filter_in_scene(const std::vector<Proposal>& ps, const Aabb& scene) {
    std::vector<Proposal> out;
    out.reserve(ps.size());
    for (const Proposal& p : ps)
        if (scene.contains(p.box.center)) out.push_back(p);
    return out;
}

namespace detail {

// indices sorted by descending score, ties keeping input order
inline std::vector<size_t> score_order(const std::vector<Proposal>& ps) {
    std::vector<size_t> order(ps.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return ps[a].score > ps[b].score; });
    return order;
}

}  // namespace detail

inline std::vector<Proposal> topk_per_level(const std::vector<Proposal>& ps, size_t k = 2500) {
    int max_level = -1;
    for (const Proposal& p : ps) max_level = std::max(max_level, p.level);
    std::vector<Proposal> out;
    for (int lv = 0; lv <= max_level; ++lv) {
        std::vector<Proposal> level;
        for (const Proposal& p : ps)
            if (p.level == lv) level.push_back(p);
        std::vector<size_t> order = detail::score_order(level);
        for (size_t r = 0; r < std::min(k, order.size()); ++r) out.push_back(level[order[r]]);
    }
    return out;
}

inline std::vector<Proposal> final_topk(const std::vector<Proposal>& ps, size_t k = 2500) {
    std::vector<size_t> order = detail::score_order(ps);
    std::vector<Proposal> out;
    out.reserve(std::min(k, order.size()));
    for (size_t r = 0; r < std::min(k, order.size()); ++r) out.push_back(ps[order[r]]);
    return out;
}

// greedy: walk boxes by descending score, drop any box overlapping a kept one
// above the threshold
inline std::vector<Proposal> nms_rotated(const std::vector<Proposal>& ps, double iou_thresh = 0.1) {
    std::vector<size_t> order = detail::score_order(ps);
    std::vector<Proposal> kept;
    for (size_t idx : order) {
        bool ok = true;
        for (const Proposal& q : kept)
            if (rotated_iou(ps[idx].box, q.box) > iou_thresh) {
                ok = false;
                break;
            }
        if (ok) kept.push_back(ps[idx]);
    }
    return kept;
}

// pyramid level for a roi by the usual log2 size rule: a roi spanning about
// four feature cells of level 0 stays there, each doubling moves one level up
inline size_t roi_level(const std::vector<LevelLayout>& levels, double cbrt_size_vox) {
    require(!levels.empty(), "roi_level: empty pyramid");
    double base = 4.0 * levels[0].stride;
    if (!(cbrt_size_vox > 0)) return 0;
    int l = int(std::floor(std::log2(cbrt_size_vox / base)));
    return size_t(std::clamp(l, 0, int(levels.size()) - 1));
}

struct RoiFeature {
    int channels = 0;
    std::vector<float> data;  // channel-major, 3x3x3 per channel
    size_t size() const { return data.size(); }
};

// 3x3x3 lattice in the enlarged, rotated roi frame; trilinear reads from the
// chosen pyramid level, zero outside the feature volume
template <class T>
RoiFeature roi_pool(const ForwardT<T>& f, const VoxelGrid& grid, const Obb& roi_world,
                    double enlarge = 1.2) {
    require(roi_world.size.x > 0 && roi_world.size.y > 0 && roi_world.size.z > 0,
            "roi_pool: degenerate roi");
    require(enlarge > 0, "roi_pool: enlarge must be positive");
    Obb roi = box_world_to_grid(roi_world, grid);
    double cbrt = std::cbrt(roi.size.x * roi.size.y * roi.size.z);
    size_t lv = roi_level(f.levels, cbrt);
    const VolumeT<T>& vol = f.tape.vol[size_t(f.fpn[lv])];
    double stride = f.levels[lv].stride;
    double c = std::cos(roi.yaw), s = std::sin(roi.yaw);

    RoiFeature out;
    out.channels = vol.C;
    out.data.assign(size_t(vol.C) * 27, 0.0f);
    for (int kz = 0; kz < 3; ++kz)
        for (int jy = 0; jy < 3; ++jy)
            for (int ix = 0; ix < 3; ++ix) {
                double fx = (ix + 0.5) / 3.0 - 0.5, fy = (jy + 0.5) / 3.0 - 0.5;
                double fz = (kz + 0.5) / 3.0 - 0.5;
                double ox = fx * roi.size.x * enlarge, oy = fy * roi.size.y * enlarge;
                double oz = fz * roi.size.z * enlarge;
                // grid coords, then into the level's own lattice
                double gx = roi.center.x + ox * c - oy * s;
                double gy = roi.center.y + ox * s + oy * c;
                double gz = roi.center.z + oz;
                double lx = (gx + 0.5) / stride - 0.5;
                double ly = (gy + 0.5) / stride - 0.5;
                double lz = (gz + 0.5) / stride - 0.5;
                int i0 = int(std::floor(lx)), j0 = int(std::floor(ly)), k0 = int(std::floor(lz));
                double tx = lx - i0, ty = ly - j0, tz = lz - k0;
                for (int ch = 0; ch < vol.C; ++ch) {
                    auto tap = [&](int di, int dj, int dk) -> double {
                        int i = i0 + di, j = j0 + dj, k = k0 + dk;
                        if (i < 0 || j < 0 || k < 0 || i >= vol.W || j >= vol.L || k >= vol.H)
                            return 0.0;
                        return double(vol.at(ch, i, j, k));
                    };
                    double v = 0;
                    for (int dk = 0; dk < 2; ++dk)
                        for (int dj = 0; dj < 2; ++dj)
                            for (int di = 0; di < 2; ++di)
                                v += tap(di, dj, dk) * (di ? tx : 1 - tx) * (dj ? ty : 1 - ty) *
                                     (dk ? tz : 1 - tz);
                    out.data[size_t(((ch * 3 + kz) * 3 + jy) * 3 + ix)] = float(v);
                }
            }
    return out;
}

// two-layer perceptron over a flattened RoiFeature: one objectness score and
// seven box offsets
struct RefineNet {
    int in = 0, hidden = 0;
    TensorT<float> w1, b1, w2, b2;
    int64_t step = 0;

    static RefineNet make(int in, int hidden, uint64_t seed) {
        require(in >= 1 && hidden >= 1, "refine net: sizes must be positive");
        RefineNet n;
        n.in = in;
        n.hidden = hidden;
        Rng rng(seed);
        auto init = [&](TensorT<float>& t, const std::string& name, int rows, int cols) {
            t.name = name;
            t.shape = {rows, cols};
            t.alloc(size_t(rows) * size_t(cols));
            double limit = std::sqrt(6.0 / cols);
            for (float& w : t.w) w = float(rng.uniform(-limit, limit));
        };
        init(n.w1, "refine.w1", hidden, in);
        init(n.b1, "refine.b1", hidden, 1);
        std::fill(n.b1.w.begin(), n.b1.w.end(), 0.0f);
        init(n.w2, "refine.w2", 8, hidden);
        init(n.b2, "refine.b2", 8, 1);
        std::fill(n.b2.w.begin(), n.b2.w.end(), 0.0f);
        return n;
    }

    struct Out {
        double score = 0;
        std::array<double, 7> g{};
        std::vector<float> h;  // post-relu hidden, kept for the backward pass
    };

    Out forward(const std::vector<float>& x) const {
        require(int(x.size()) == in, "refine net: feature size mismatch");
        Out o;
        o.h.assign(size_t(hidden), 0.0f);
        for (int r = 0; r < hidden; ++r) {
            double acc = b1.w[size_t(r)];
            const float* wr = w1.w.data() + size_t(r) * size_t(in);
            for (int cidx = 0; cidx < in; ++cidx) acc += double(wr[cidx]) * double(x[size_t(cidx)]);
            o.h[size_t(r)] = acc > 0 ? float(acc) : 0.0f;
        }
        std::array<double, 8> z{};
        for (int r = 0; r < 8; ++r) {
            double acc = b2.w[size_t(r)];
            const float* wr = w2.w.data() + size_t(r) * size_t(hidden);
            for (int cidx = 0; cidx < hidden; ++cidx) acc += double(wr[cidx]) * double(o.h[size_t(cidx)]);
            z[size_t(r)] = acc;
        }
        o.score = 1.0 / (1.0 + std::exp(-z[0]));
        for (int k = 0; k < 7; ++k) o.g[size_t(k)] = z[size_t(k + 1)];
        return o;
    }

    // ds is dL/d(score) after the sigmoid, dg is dL/d(offsets)
    void accumulate_grads(const std::vector<float>& x, const Out& o, double ds,
                          const std::array<double, 7>& dg) {
        std::array<double, 8> dz{};
        dz[0] = ds * o.score * (1.0 - o.score);
        for (int k = 0; k < 7; ++k) dz[size_t(k + 1)] = dg[size_t(k)];
        std::vector<double> dh(size_t(hidden), 0.0);
        for (int r = 0; r < 8; ++r) {
            float* gw = w2.g.data() + size_t(r) * size_t(hidden);
            const float* wr = w2.w.data() + size_t(r) * size_t(hidden);
            for (int cidx = 0; cidx < hidden; ++cidx) {
                gw[cidx] += float(dz[size_t(r)] * double(o.h[size_t(cidx)]));
                dh[size_t(cidx)] += dz[size_t(r)] * double(wr[cidx]);
            }
            b2.g[size_t(r)] += float(dz[size_t(r)]);
        }
        for (int r = 0; r < hidden; ++r) {
            if (o.h[size_t(r)] <= 0.0f) continue;
            float* gw = w1.g.data() + size_t(r) * size_t(in);
            for (int cidx = 0; cidx < in; ++cidx) gw[cidx] += float(dh[size_t(r)] * double(x[size_t(cidx)]));
            b1.g[size_t(r)] += float(dh[size_t(r)]);
        }
    }

    void zero_grads() {
        for (TensorT<float>* t : {&w1, &b1, &w2, &b2}) std::fill(t->g.begin(), t->g.end(), 0.0f);
    }

    void adamw_step(double lr, double wd) {
        ++step;
        for (TensorT<float>* t : {&w1, &b1, &w2, &b2}) adamw_update(*t, step, lr, wd);
        zero_grads();
    }
};

struct RefineSample {
    std::vector<float> feature;
    int8_t label = 0;
    RoiOffset target;
};

// pooled features plus labels/offsets against the scene's ground truth,
// ready for the perceptron trainer
template <class T>
std::vector<RefineSample> make_refine_samples(const ForwardT<T>& f, const VoxelGrid& grid,
                                              const std::vector<Proposal>& ps,
                                              const std::vector<Obb>& gts_world,
                                              double enlarge = 1.2) {
    std::vector<Obb> rois;
    rois.reserve(ps.size());
    for (const Proposal& p : ps) rois.push_back(p.box);
    RoiLabels labels = label_rois(rois, gts_world);
    std::vector<RefineSample> out;
    out.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        RefineSample s;
        s.feature = roi_pool(f, grid, ps[i].box, enlarge).data;
        s.label = labels.label[i];
        if (labels.label[i] == 1) s.target = encode_roi(gts_world[size_t(labels.gt_index[i])], rois[i]);
        out.push_back(std::move(s));
    }
    return out;
}

// full-batch AdamW on the refinement perceptron; lr/wd defaults follow the
// fine-tuning schedule (1e-4 both)
inline std::vector<LossBreakdown> train_refine(RefineNet& net, const std::vector<RefineSample>& samples,
                                               int steps, double lr = 1e-4, double wd = 1e-4,
                                               const LossConfig& cfg = {}) {
    require(!samples.empty(), "train_refine: no samples");
    require(steps >= 0, "train_refine: steps >= 0");
    std::vector<int8_t> labels;
    std::vector<RoiOffset> targets;
    for (const RefineSample& s : samples) {
        labels.push_back(s.label);
        targets.push_back(s.target);
    }
    std::vector<LossBreakdown> history;
    for (int it = 0; it < steps; ++it) {
        std::vector<RefineNet::Out> outs;
        std::vector<double> scores;
        std::vector<std::array<double, 7>> g;
        outs.reserve(samples.size());
        for (const RefineSample& s : samples) {
            outs.push_back(net.forward(s.feature));
            scores.push_back(outs.back().score);
            g.push_back(outs.back().g);
        }
        RefineLossGrads lg = objectness_loss(scores, g, labels, targets, cfg);
        if (!std::isfinite(lg.breakdown.total))
            throw std::runtime_error("train_refine: non-finite loss at step " + std::to_string(it));
        for (size_t i = 0; i < samples.size(); ++i)
            net.accumulate_grads(samples[i].feature, outs[i], lg.ds[i], lg.dg[i]);
        net.adamw_step(lr, wd);
        history.push_back(lg.breakdown);
    }
    return history;
}

// rescore pooled proposals and apply the predicted offsets; only boxes the
// classifier calls object (score strictly above one half) survive
template <class T>
std::vector<Proposal> refine(const std::vector<Proposal>& ps, const ForwardT<T>& f,
                             const VoxelGrid& grid, const RefineNet& net, double enlarge = 1.2) {
    std::vector<Proposal> out;
    for (const Proposal& p : ps) {
        RoiFeature feat = roi_pool(f, grid, p.box, enlarge);
        RefineNet::Out o = net.forward(feat.data);
        if (!(o.score > 0.5)) continue;
        Proposal r = p;
        r.box = decode_roi(RoiOffset{o.g}, p.box);
        r.score = o.score;
        out.push_back(r);
    }
    return out;
}

struct ProposeOptions {
    size_t topk = 2500;
    double nms_iou = 0.1;
    bool score_mul_centerness = false;   // paper leaves test-time fusion unstated
    std::vector<double> anchor_shortest;  // empty = 3x stride per level

    void validate() const {
        require(topk >= 1, "propose: topk >= 1");
        require(nms_iou >= 0 && nms_iou <= 1, "propose: nms iou in [0,1]");
    }
};

struct ProposeResult {
    std::vector<Proposal> proposals;
    std::map<std::string, double> timings_ms;
};

template <class T>
ProposeResult propose_from_forward(const ForwardT<T>& f, HeadKind head, const VoxelGrid& grid,
                                   const ProposeOptions& opt = {}) {
    opt.validate();
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a, clock::time_point b) {
        return std::chrono::duration<double, std::milli>(b - a).count();
    };
    ProposeResult out;
    auto t0 = clock::now();
    std::vector<Proposal> ps;
    if (head == HeadKind::Anchor) {
        std::vector<Anchor> anchors = flatten_anchor_levels(generate_anchors(
            f.levels, anchor_shortest_sides(f.levels, opt.anchor_shortest),
            default_anchor_ratios()));
        ps = decode_all_anchor(f, anchors, grid);
    } else {
        ps = decode_all_fcos(f, grid, opt.score_mul_centerness);
    }
    auto t1 = clock::now();
    ps = filter_in_scene(ps, grid.bounds());
    auto t2 = clock::now();
    ps = topk_per_level(ps, opt.topk);
    auto t3 = clock::now();
    ps = nms_rotated(ps, opt.nms_iou);
    ps = final_topk(ps, opt.topk);
    auto t4 = clock::now();
    out.proposals = std::move(ps);
    out.timings_ms["decode"] = ms(t0, t1);
    out.timings_ms["filter"] = ms(t1, t2);
    out.timings_ms["topk"] = ms(t2, t3);
    out.timings_ms["nms"] = ms(t3, t4);
    return out;
}

template <class T>
ProposeResult propose(NetT<T>& net, const VoxelGrid& grid, const ProposeOptions& opt = {}) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    ForwardT<T> f = net.forward(grid_to_volume<T>(grid));
    auto t1 = clock::now();
    ProposeResult out = propose_from_forward(f, net.cfg.head, grid, opt);
    out.timings_ms["forward"] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    double total = 0;
    for (const auto& [k, v] : out.timings_ms) total += v;
    out.timings_ms["total"] = total;
    return out;
}

inline json proposal_to_json(const Proposal& p) {
    json j = {{"box", obb_to_json(p.box)}, {"score", p.score}, {"level", p.level}};
    if (p.centerness) j["centerness"] = *p.centerness;
    return j;
}

inline Proposal proposal_from_json(const json& j) {
    check_keys(j, {"box", "score", "level"}, {"centerness"}, "proposal");
    Proposal p;
    p.box = obb_from_json(j["box"]);
    p.score = finite_number(j["score"], "proposal.score");
    require(p.score >= 0 && p.score <= 1, "proposal: score must lie in [0,1]");
    p.level = j["level"].get<int>();
    if (j.contains("centerness"))
        p.centerness = finite_number(j["centerness"], "proposal.centerness");
    return p;
}

inline json proposals_to_json(const ProposeResult& r) {
    json arr = json::array();
    for (const Proposal& p : r.proposals) arr.push_back(proposal_to_json(p));
    json t = json::object();
    for (const auto& [k, v] : r.timings_ms) t[k] = v;
    return {{"proposals", arr}, {"timings_ms", t}};
}

inline std::vector<Proposal> proposals_from_json(const json& j) {
    require(j.is_object() && j.contains("proposals"), "proposals json: missing 'proposals'");
    std::vector<Proposal> out;
    for (const json& e : j["proposals"]) out.push_back(proposal_from_json(e));
    return out;
}

}  // namespace voxrpn
