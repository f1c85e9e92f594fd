#pragma once

#include <ostream>

#include "voxrpn/losses.hpp"
#include "voxrpn/net.hpp"
#include "voxrpn/scene.hpp"

namespace voxrpn {

// one training example: sampled feature grid plus world-frame boxes, and
// optionally the cameras that observed the scene (projection term)
struct TrainScene {
    VoxelGrid grid;
    std::vector<Obb> boxes;
    std::vector<Camera> cameras;
};

struct TrainOptions {
    int steps = 500;
    double lr = 3e-4;
    double wd = 1e-3;
    uint64_t seed = 1;
    LossConfig loss;
    bool augment = true;
    AugmentSpec aug;
    int minibatch = 256;
    double pos_fraction = 0.5;
    std::vector<double> anchor_shortest;  // per pyramid level; empty = 3x stride
    double anchor_pos_iou = 0.35;
    double anchor_neg_iou = 0.2;
    double proj_weight = 0.0;             // 0 disables the 2D projection term
    int checkpoint_every = 0;
    std::string ckpt_path;
    std::ostream* log = nullptr;

    void validate() const {
        require(steps >= 0, "train: steps >= 0");
        require(lr > 0 && wd >= 0, "train: lr > 0 and wd >= 0");
        require(minibatch > 0, "train: minibatch > 0");
        require(pos_fraction >= 0 && pos_fraction <= 1, "train: pos_fraction in [0,1]");
        require(anchor_neg_iou >= 0 && anchor_pos_iou > anchor_neg_iou && anchor_pos_iou < 1,
                "train: anchor iou thresholds need 0 <= neg < pos < 1");
        require(proj_weight >= 0, "train: proj_weight >= 0");
        require(checkpoint_every >= 0, "train: checkpoint_every >= 0");
        loss.validate();
        aug.validate();
    }
};

namespace detail {

// dL/dt for one sample, from dL/d(world box) through the grid decode and the
// grid-to-world similarity (uniform scale + translation)
inline std::array<double, 8> chain_world_box_to_t(const std::array<double, 7>& dbox,
                                                  const ObbT<Dual<8>>& box_grid, double spacing) {
    const Dual<8>* comp[7] = {&box_grid.center[0], &box_grid.center[1], &box_grid.center[2],
                              &box_grid.size[0],   &box_grid.size[1],   &box_grid.size[2],
                              &box_grid.yaw};
    std::array<double, 8> dt{};
    for (int ci = 0; ci < 7; ++ci) {
        double s = ci < 6 ? spacing : 1.0;
        for (int k = 0; k < 8; ++k) dt[size_t(k)] += dbox[size_t(ci)] * s * comp[ci]->d[size_t(k)];
    }
    return dt;
}

inline std::array<Dual<8>, 8> seed_t8(const std::array<double, 8>& t) {
    std::array<Dual<8>, 8> d;
    for (int k = 0; k < 8; ++k) d[size_t(k)] = Dual<8>::seed(t[size_t(k)], size_t(k));
    return d;
}

}  // namespace detail

// Adds the weighted multi-view consistency term for the positive samples of
// this step. The breakdown gains a proj entry and the total grows by exactly
// that entry; dt picks up the chained gradients.
template <class GetBox>
void add_projection_term(LossBreakdown& bd, std::vector<std::array<double, 8>>& dt,
                         const std::vector<uint32_t>& sample_ids,
                         const std::vector<int32_t>& matched_gt, const std::vector<Obb>& gts,
                         const std::vector<std::array<double, 8>>& t,
                         const std::vector<Camera>& cams, const VoxelGrid& grid, double weight,
                         GetBox&& decode_sample) {
    std::vector<Obb> pred_w, gt_w;
    std::vector<ObbT<Dual<8>>> pred_dual;
    for (uint32_t id : sample_ids) {
        ObbT<Dual<8>> bg = decode_sample(id, detail::seed_t8(t[id]));
        Obb value({value_of(bg.center[0]), value_of(bg.center[1]), value_of(bg.center[2])},
                  {value_of(bg.size[0]), value_of(bg.size[1]), value_of(bg.size[2])},
                  value_of(bg.yaw));
        pred_w.push_back(box_grid_to_world(value, grid));
        gt_w.push_back(box_grid_to_world(gts[size_t(matched_gt[id])], grid));
        pred_dual.push_back(bg);
    }
    if (pred_w.empty()) {
        bd.proj = 0.0;
        return;
    }
    ProjLossGrads pg = proj_loss_2d(pred_w, gt_w, cams);
    bd.proj = weight * pg.loss;
    bd.total += *bd.proj;
    for (size_t s = 0; s < sample_ids.size(); ++s) {
        std::array<double, 8> d =
            detail::chain_world_box_to_t(pg.dbox[s], pred_dual[s], grid.spacing());
        for (int k = 0; k < 8; ++k) dt[sample_ids[s]][size_t(k)] += weight * d[size_t(k)];
    }
}

// Forward + loss (+ gradients into the net unless told otherwise) for one
// already-augmented scene. Boxes come in world coordinates.
template <class T>
LossBreakdown train_step(NetT<T>& net, const VoxelGrid& grid, const std::vector<Obb>& boxes_world,
                         const std::vector<Camera>& cams, const TrainOptions& opt,
                         uint64_t minibatch_seed, bool do_backward = true) {
    VolumeT<T> in = grid_to_volume<T>(grid);
    ForwardT<T> f = net.forward(in);
    std::vector<Obb> gts;
    gts.reserve(boxes_world.size());
    for (const Obb& b : boxes_world) gts.push_back(box_world_to_grid(b, grid));
    LossBreakdown bd;
    bool want_proj = opt.proj_weight > 0 && !cams.empty();
    if (net.cfg.head == HeadKind::Anchor) {
        FlatAnchorOut flat = flatten_anchor_outputs(f);
        std::vector<Anchor> anchors = flatten_anchor_levels(generate_anchors(
            f.levels, anchor_shortest_sides(f.levels, opt.anchor_shortest),
            default_anchor_ratios()));
        AssignmentResult as = assign_anchors(anchors, gts, opt.anchor_pos_iou, opt.anchor_neg_iou);
        Minibatch mb = sample_minibatch(as, size_t(opt.minibatch), opt.pos_fraction,
                                        minibatch_seed);
        AnchorLossGrads ag = rpn_loss_anchor(flat.p, flat.t, anchors, as, mb, gts, opt.loss);
        bd = ag.breakdown;
        if (want_proj)
            add_projection_term(bd, ag.dt, mb.pos, as.gt_index, gts, flat.t, cams, grid,
                                opt.proj_weight, [&](uint32_t id, std::array<Dual<8>, 8> td) {
                                    return decode_anchor_t(td, anchors[id]);
                                });
        if (do_backward) {
            scatter_anchor_grads(f, ag.dp, ag.dt);
            net.backward(f);
        }
    } else {
        FlatFcosOut flat = flatten_fcos_outputs(f);
        std::vector<FcosTarget> targets = assign_fcos(f.levels, gts);
        std::vector<Vec3> positions = pyramid_positions(f.levels);
        FcosLossGrads fg = rpn_loss_fcos(flat.p, flat.t, flat.c, targets, positions, gts, opt.loss);
        bd = fg.breakdown;
        if (want_proj) {
            std::vector<uint32_t> pos_ids;
            std::vector<int32_t> matched(targets.size(), -1);
            for (size_t i = 0; i < targets.size(); ++i)
                if (targets[i].label == 1) {
                    pos_ids.push_back(uint32_t(i));
                    matched[i] = targets[i].gt_index;
                }
            add_projection_term(bd, fg.dt, pos_ids, matched, gts, flat.t, cams, grid,
                                opt.proj_weight, [&](uint32_t id, std::array<Dual<8>, 8> td) {
                                    return decode_fcos_t(positions[id], td);
                                });
        }
        if (do_backward) {
            scatter_fcos_grads(f, fg.dp, fg.dc, fg.dt);
            net.backward(f);
        }
    }
    return bd;
}

struct TrainResult {
    NetT<float> net;
    std::vector<LossBreakdown> history;
};

// augment -> forward -> assign -> loss -> backward -> AdamW, one scene per
// step, fully determined by the seed
inline TrainResult train(const NetConfig& netcfg, const std::vector<TrainScene>& scenes,
                         const TrainOptions& opt) {
    opt.validate();
    require(!scenes.empty(), "train: no scenes");
    for (const TrainScene& s : scenes)
        require(s.grid.C() == netcfg.in_channels, "train: scene grid has " +
                                                      std::to_string(s.grid.C()) +
                                                      " channels, net expects " +
                                                      std::to_string(netcfg.in_channels));
    TrainResult res{NetT<float>::make(netcfg, opt.seed), {}};
    Rng root(opt.seed);
    for (int s = 0; s < opt.steps; ++s) {
        Rng sr = root.split(uint64_t(s) + 1);
        size_t idx = size_t(sr.split(1).uniform_int(scenes.size()));
        const TrainScene& sc = scenes[idx];
        VoxelGrid g = sc.grid;
        std::vector<Obb> boxes = sc.boxes;
        if (opt.augment) {
            auto moved = augment(sc.grid, sc.boxes, opt.aug, sr.split(2).u64());
            g = std::move(moved.first);
            boxes = std::move(moved.second);
        }
        LossBreakdown bd = train_step(res.net, g, boxes, sc.cameras, opt, sr.split(3).u64());
        if (!std::isfinite(bd.total))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(s) + ": " +
                                     breakdown_to_json(bd).dump());
        if (opt.log) {
            json line = breakdown_to_json(bd);
            line["step"] = s;
            line["scene"] = idx;
            (*opt.log) << line.dump() << "\n";
        }
        res.history.push_back(bd);
        res.net.adamw_step(opt.lr, opt.wd);
        if (opt.checkpoint_every > 0 && !opt.ckpt_path.empty() &&
            (s + 1) % opt.checkpoint_every == 0)
            save_checkpoint(res.net, opt.ckpt_path);
    }
    if (!opt.ckpt_path.empty()) save_checkpoint(res.net, opt.ckpt_path);
    return res;
}

}  // namespace voxrpn
