#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "voxrpn/losses.hpp"

using namespace voxrpn;

TEST_CASE("scalar losses", "[losses]") {
    SECTION("binary cross entropy") {
        CHECK(bce(1.0, 1).loss < 1e-6);
        CHECK(bce(0.0, 0).loss < 1e-6);
        CHECK(bce(0.5, 1).loss == Catch::Approx(std::log(2.0)).margin(1e-12));
        CHECK(bce(0.5, 0).loss == Catch::Approx(std::log(2.0)).margin(1e-12));
        for (double p : {0.1, 0.3, 0.62, 0.9})
            for (int star : {0, 1}) {
                double fd = oracle::central_diff(
                    [&](const std::vector<double>& x) { return bce(x[0], star).loss; }, {p}, 0);
                CHECK(oracle::rel_err(bce(p, star).grad, fd) < 1e-8);
            }
    }
    SECTION("soft-target cross entropy is zero at the target") {
        for (double cstar : {0.0, 0.25, 0.6, 1.0}) {
            CHECK(bce_soft(cstar, cstar).loss < 1e-12);
            CHECK(bce_soft(0.5 * cstar + 0.2, cstar).loss >= 0.0);
        }
        double fd = oracle::central_diff(
            [&](const std::vector<double>& x) { return bce_soft(x[0], 0.37).loss; }, {0.61}, 0);
        CHECK(oracle::rel_err(bce_soft(0.61, 0.37).grad, fd) < 1e-8);
    }
    SECTION("smooth l1") {
        CHECK(smooth_l1(0.0).loss == 0.0);
        CHECK(smooth_l1(0.5).loss == 0.125);
        CHECK(smooth_l1(2.0).loss == 1.5);
        CHECK(smooth_l1(-2.0).loss == 1.5);
        // continuous across the switch
        CHECK(std::abs(smooth_l1(1.0 - 1e-9).loss - smooth_l1(1.0 + 1e-9).loss) < 1e-8);
        for (double x : {-2.3, -0.4, 0.2, 3.1}) {
            double fd = oracle::central_diff(
                [&](const std::vector<double>& v) { return smooth_l1(v[0]).loss; }, {x}, 0);
            CHECK(oracle::rel_err(smooth_l1(x).grad, fd) < 1e-8);
        }
    }
    SECTION("focal loss") {
        CHECK(focal(1.0, 1).loss < 1e-12);
        CHECK(focal(0.0, 0).loss < 1e-12);
        CHECK(focal(0.5, 1).loss == Catch::Approx(0.25 * 0.25 * std::log(2.0)).margin(1e-12));
        for (double p : {0.2, 0.5, 0.8})
            for (int star : {0, 1})
                CHECK(focal(p, star, 0.0, 0.5).loss ==
                      Catch::Approx(0.5 * bce(p, star).loss).margin(1e-12));
        for (double p : {0.15, 0.5, 0.85})
            for (int star : {0, 1}) {
                double fd = oracle::central_diff(
                    [&](const std::vector<double>& x) { return focal(x[0], star).loss; }, {p}, 0);
                CHECK(oracle::rel_err(focal(p, star).grad, fd) < 1e-6);
            }
    }
}

namespace {

std::vector<double> box_params(const Obb& b) {
    return {b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.yaw};
}

Obb box_from_params(const std::vector<double>& x) {
    return Obb({x[0], x[1], x[2]}, {x[3], x[4], x[5]}, x[6]);
}

}  // namespace

TEST_CASE("rotated overlap losses", "[losses]") {
    SECTION("dual pipeline value matches the plain one") {
        Rng rng(11);
        for (int it = 0; it < 300; ++it) {
            Obb a = oracle::random_box(rng), b = oracle::random_box(rng);
            ObbT<double> at{{a.center.x, a.center.y, a.center.z},
                            {a.size.x, a.size.y, a.size.z},
                            a.yaw};
            ObbT<double> bt{{b.center.x, b.center.y, b.center.z},
                            {b.size.x, b.size.y, b.size.z},
                            b.yaw};
            CHECK(std::abs(rotated_iou_t(at, bt) - rotated_iou(a, b)) < 1e-12);
            CHECK(std::abs(diou_penalty_t(at, bt) - diou_penalty(a, b)) < 1e-12);
        }
    }
    SECTION("fixed points and hand values") {
        Obb b({1, 2, 3}, {2, 1.5, 1}, 0.4);
        CHECK(iou_loss(b, b).loss < 1e-12);
        CHECK(diou_loss(b, b).loss < 1e-12);
        Obb u0({0, 0, 0}, {1, 1, 1}, 0.0), far({10, 0, 0}, {1, 1, 1}, 0.0);
        CHECK(iou_loss(u0, far).loss == 1.0);
        // half-overlapping unit cubes: iou 1/3, diou penalty 0.25/4.25
        Obb u1({0.5, 0, 0}, {1, 1, 1}, 0.0);
        CHECK(iou_loss(u0, u1).loss == Catch::Approx(2.0 / 3.0).margin(1e-12));
        CHECK(diou_loss(u0, u1).loss == Catch::Approx(2.0 / 3.0 + 1.0 / 17.0).margin(1e-12));
    }
    SECTION("gradients match finite differences of the plain pipeline") {
        Rng rng(20240813);
        int checked = 0;
        for (int it = 0; it < 20; ++it) {
            Obb gt = oracle::random_box(rng, -1, 1, 1.0, 2.5);
            Obb pred(gt.center + Vec3{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                      rng.uniform(-0.3, 0.3)},
                     {gt.size.x * rng.uniform(0.8, 1.2), gt.size.y * rng.uniform(0.8, 1.2),
                      gt.size.z * rng.uniform(0.8, 1.2)},
                     gt.yaw + rng.uniform(-0.2, 0.2));
            REQUIRE(rotated_iou(pred, gt) > 0.2);
            for (bool use_diou : {false, true}) {
                auto f = [&](const std::vector<double>& x) {
                    Obb p = box_from_params(x);
                    double l = 1.0 - rotated_iou(p, gt);
                    if (use_diou) l += diou_penalty(p, gt);
                    return l;
                };
                BoxLossGrad got = use_diou ? diou_loss(pred, gt) : iou_loss(pred, gt);
                for (size_t i = 0; i < 7; ++i) {
                    double fd = oracle::central_diff(f, box_params(pred), i, 1e-5);
                    bool ok = oracle::rel_err(got.grad[i], fd) < 1e-4 ||
                              std::abs(got.grad[i] - fd) < 1e-7;
                    REQUIRE(ok);
                    ++checked;
                }
            }
        }
        CHECK(checked == 20 * 2 * 7);
    }
}

namespace {

// three anchors, one gt, hand-checkable setup shared by the anchor-loss tests
struct AnchorCase {
    std::vector<Anchor> anchors;
    std::vector<Obb> gts;
    AssignmentResult as;
    Minibatch mb;
    std::vector<double> p;
    std::vector<std::array<double, 8>> t;
};

AnchorCase make_anchor_case() {
    AnchorCase c;
    c.gts = {Obb({5, 5, 5}, {4, 3, 2}, 0.0)};
    c.anchors = {{{5, 5, 5}, {4, 3, 2}, 0}, {{20, 20, 20}, {4, 3, 2}, 0}, {{5.5, 5, 5}, {4, 4, 2}, 0}};
    c.as.label = {1, 0, 1};
    c.as.gt_index = {0, -1, 0};
    c.mb.pos = {0, 2};
    c.mb.neg = {1};
    c.p = {1.0, 0.0, 1.0};
    c.t.resize(3);
    c.t[0] = encode_anchor(c.gts[0], c.anchors[0]).t;
    c.t[2] = encode_anchor(c.gts[0], c.anchors[2]).t;
    return c;
}

}  // namespace

TEST_CASE("anchor head composite loss", "[losses]") {
    LossConfig cfg;
    cfg.reg = RegLoss::SmoothL1;
    SECTION("perfect predictions vanish") {
        AnchorCase c = make_anchor_case();
        auto r = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        CHECK(r.breakdown.total < 1e-6);
        CHECK(r.breakdown.reg == 0.0);
        CHECK(r.breakdown.n_cls == 3);
        CHECK(r.breakdown.n_reg == 2);
    }
    SECTION("hand-computed value") {
        AnchorCase c = make_anchor_case();
        c.p = {0.7, 0.2, 0.6};
        c.t[0][0] += 0.5;  // smooth-l1 0.125
        c.t[2][3] -= 2.0;  // smooth-l1 1.5
        auto r = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        double cls = (-std::log(0.7) - std::log(0.8) - std::log(0.6)) / 3.0;
        double reg = 5.0 * (0.125 + 1.5) / 2.0;
        CHECK(r.breakdown.cls == Catch::Approx(cls).margin(1e-12));
        CHECK(r.breakdown.reg == Catch::Approx(reg).margin(1e-12));
        CHECK(r.breakdown.total == Catch::Approx(cls + reg).margin(1e-12));
    }
    SECTION("doubling lambda doubles exactly the regression term") {
        AnchorCase c = make_anchor_case();
        c.p = {0.7, 0.2, 0.6};
        c.t[0][0] += 0.5;
        LossConfig twice = cfg;
        twice.lambda_anchor = 10.0;
        auto r5 = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        auto r10 = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, twice);
        CHECK(r10.breakdown.reg == 2.0 * r5.breakdown.reg);
        CHECK(r10.breakdown.cls == r5.breakdown.cls);
    }
    SECTION("no positives keeps the loss defined") {
        AnchorCase c = make_anchor_case();
        c.mb.pos.clear();
        auto r = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        CHECK(r.breakdown.reg == 0.0);
        CHECK(std::isfinite(r.breakdown.total));
        CHECK(r.breakdown.n_reg == 0);
    }
    SECTION("gradients match finite differences") {
        AnchorCase c = make_anchor_case();
        // rotated target keeps the decode path away from its degenerate branch
        c.gts = {Obb({5, 5, 5}, {4, 3, 2}, 0.3)};
        c.t[0] = encode_anchor(c.gts[0], c.anchors[0]).t;
        c.t[2] = encode_anchor(c.gts[0], c.anchors[2]).t;
        c.p = {0.7, 0.2, 0.6};
        c.t[0][0] += 0.3;
        c.t[0][6] += 0.04;
        c.t[2][6] += 0.1;
        for (RegLoss variant : {RegLoss::SmoothL1, RegLoss::IoU, RegLoss::DIoU}) {
            LossConfig vc = cfg;
            vc.reg = variant;
            auto r = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, vc);
            double fdp = oracle::central_diff(
                [&](const std::vector<double>& x) {
                    auto p2 = c.p;
                    p2[1] = x[0];
                    return rpn_loss_anchor(p2, c.t, c.anchors, c.as, c.mb, c.gts, vc)
                        .breakdown.total;
                },
                {c.p[1]}, 0);
            CHECK(oracle::rel_err(r.dp[1], fdp) < 1e-6);
            for (size_t comp : {0, 3, 6}) {
                double fdt = oracle::central_diff(
                    [&](const std::vector<double>& x) {
                        auto t2 = c.t;
                        t2[0][comp] = x[0];
                        return rpn_loss_anchor(c.p, t2, c.anchors, c.as, c.mb, c.gts, vc)
                            .breakdown.total;
                    },
                    {c.t[0][comp]}, 0, 1e-5);
                bool ok = oracle::rel_err(r.dt[0][comp], fdt) < 1e-4 ||
                          std::abs(r.dt[0][comp] - fdt) < 1e-7;
                CHECK(ok);
            }
        }
    }
    SECTION("sample order does not change the value") {
        AnchorCase c = make_anchor_case();
        c.p = {0.7, 0.2, 0.6};
        c.t[0][0] += 0.5;
        auto r = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        std::swap(c.mb.pos[0], c.mb.pos[1]);
        auto r2 = rpn_loss_anchor(c.p, c.t, c.anchors, c.as, c.mb, c.gts, cfg);
        CHECK(r2.breakdown.total == Catch::Approx(r.breakdown.total).margin(1e-12));
    }
}

TEST_CASE("per-voxel composite loss", "[losses]") {
    LossConfig cfg;  // IoU regression
    SECTION("perfect predictions vanish") {
        std::vector<LevelLayout> levels = {{1, 12, 12, 8}};
        std::vector<Obb> gts = {Obb({6, 6, 4}, {5, 4, 3}, 0.3)};
        auto targets = assign_fcos(levels, gts);
        auto positions = pyramid_positions(levels);
        size_t n = targets.size();
        std::vector<double> p(n), c(n);
        std::vector<std::array<double, 8>> t(n);
        for (size_t i = 0; i < n; ++i) {
            p[i] = targets[i].label;
            c[i] = targets[i].cstar;
            t[i] = targets[i].t;
        }
        auto r = rpn_loss_fcos(p, t, c, targets, positions, gts, cfg);
        CHECK(r.breakdown.total < 1e-6);
        CHECK(r.breakdown.n_pos > 0);
        CHECK(r.breakdown.n_cls == int(n));
    }
    SECTION("two-voxel hand case") {
        LossConfig sc = cfg;
        sc.reg = RegLoss::SmoothL1;
        std::vector<FcosTarget> targets(2);
        targets[0].label = 1;
        targets[0].gt_index = 0;
        targets[0].cstar = 0.6;
        targets[0].t = {1, 1, 1, 1, 1, 1, 0.5, 0.5};
        std::vector<Vec3> positions = {{5, 5, 5}, {9, 9, 9}};
        std::vector<Obb> gts = {Obb({5, 5, 5}, {2, 2, 2}, 0.0)};
        std::vector<double> p = {0.8, 0.3}, c = {0.5, 0.9};
        std::vector<std::array<double, 8>> t(2);
        t[0] = targets[0].t;
        t[0][2] += 0.5;  // smooth-l1 0.125
        auto r = rpn_loss_fcos(p, t, c, targets, positions, gts, sc);
        double cls = -0.25 * 0.04 * std::log(0.8) - 0.75 * 0.09 * std::log(0.7);
        double ctr = 0.6 * std::log(0.6 / 0.5) + 0.4 * std::log(0.4 / 0.5);
        CHECK(r.breakdown.cls == Catch::Approx(cls).margin(1e-12));
        CHECK(r.breakdown.reg == Catch::Approx(0.125).margin(1e-12));
        CHECK(*r.breakdown.ctr == Catch::Approx(ctr).margin(1e-12));
        CHECK(r.breakdown.total == Catch::Approx(cls + 0.125 + ctr).margin(1e-12));
        CHECK(r.breakdown.n_pos == 1);
    }
    SECTION("centerness term is the positive-average of its bce") {
        std::vector<LevelLayout> levels = {{1, 10, 10, 6}};
        std::vector<Obb> gts = {Obb({5, 5, 3}, {6, 5, 3}, 0.2)};
        auto targets = assign_fcos(levels, gts);
        auto positions = pyramid_positions(levels);
        size_t n = targets.size();
        Rng rng(5);
        std::vector<double> p(n), c(n);
        std::vector<std::array<double, 8>> t(n);
        for (size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform(0.1, 0.9);
            c[i] = rng.uniform(0.1, 0.9);
            t[i] = targets[i].t;
        }
        auto r = rpn_loss_fcos(p, t, c, targets, positions, gts, cfg);
        double acc = 0;
        int n_pos = 0;
        for (size_t i = 0; i < n; ++i)
            if (targets[i].label == 1) {
                acc += bce_soft(c[i], targets[i].cstar).loss;
                ++n_pos;
            }
        REQUIRE(n_pos > 0);
        CHECK(*r.breakdown.ctr == Catch::Approx(acc / n_pos).margin(1e-10));
    }
    SECTION("no positives falls back to a pure focal term") {
        std::vector<FcosTarget> targets(4);
        std::vector<Vec3> positions(4, Vec3{0, 0, 0});
        std::vector<double> p = {0.2, 0.3, 0.1, 0.4}, c = {0.5, 0.5, 0.5, 0.5};
        std::vector<std::array<double, 8>> t(4);
        auto r = rpn_loss_fcos(p, t, c, targets, positions, {}, cfg);
        CHECK(r.breakdown.n_pos == 0);
        CHECK(r.breakdown.reg == 0.0);
        CHECK(*r.breakdown.ctr == 0.0);
        double want = 0;
        for (double pi : p) want += focal(pi, 0).loss;
        CHECK(r.breakdown.total == Catch::Approx(want).margin(1e-12));
    }
    SECTION("gradients match finite differences") {
        std::vector<FcosTarget> targets(2);
        std::vector<Obb> gts = {Obb({5, 5, 5}, {3, 2.5, 2}, 0.4)};
        std::vector<Vec3> positions = {{5.2, 4.9, 5.1}, {9, 9, 9}};
        targets[0] = encode_fcos(positions[0], gts[0]);
        targets[0].gt_index = 0;
        std::vector<double> p = {0.6, 0.2}, c = {0.4, 0.8};
        std::vector<std::array<double, 8>> t(2);
        t[0] = targets[0].t;
        for (int k = 0; k < 8; ++k) t[0][k] += 0.05 * (k % 3);
        for (RegLoss variant : {RegLoss::SmoothL1, RegLoss::IoU, RegLoss::DIoU}) {
            LossConfig vc = cfg;
            vc.reg = variant;
            auto r = rpn_loss_fcos(p, t, c, targets, positions, gts, vc);
            double fdp = oracle::central_diff(
                [&](const std::vector<double>& x) {
                    auto p2 = p;
                    p2[0] = x[0];
                    return rpn_loss_fcos(p2, t, c, targets, positions, gts, vc).breakdown.total;
                },
                {p[0]}, 0);
            CHECK(oracle::rel_err(r.dp[0], fdp) < 1e-6);
            double fdc = oracle::central_diff(
                [&](const std::vector<double>& x) {
                    auto c2 = c;
                    c2[0] = x[0];
                    return rpn_loss_fcos(p, t, c2, targets, positions, gts, vc).breakdown.total;
                },
                {c[0]}, 0);
            CHECK(oracle::rel_err(r.dc[0], fdc) < 1e-6);
            for (size_t comp : {1, 4, 7}) {
                double fdt = oracle::central_diff(
                    [&](const std::vector<double>& x) {
                        auto t2 = t;
                        t2[0][comp] = x[0];
                        return rpn_loss_fcos(p, t2, c, targets, positions, gts, vc)
                            .breakdown.total;
                    },
                    {t[0][comp]}, 0, 1e-5);
                bool ok = oracle::rel_err(r.dt[0][comp], fdt) < 1e-4 ||
                          std::abs(r.dt[0][comp] - fdt) < 1e-7;
                CHECK(ok);
            }
        }
    }
}

TEST_CASE("roi labels and refinement loss", "[losses]") {
    LossConfig cfg;
    cfg.reg = RegLoss::SmoothL1;
    SECTION("labels split exactly at the threshold") {
        std::vector<Obb> gts = {Obb({0, 0, 0}, {1, 1, 1}, 0.0)};
        // x-offset 0.6 -> overlap 0.4 -> iou exactly 0.25, not strictly above
        std::vector<Obb> rois = {Obb({0.6, 0, 0}, {1, 1, 1}, 0.0),
                                 Obb({0.55, 0, 0}, {1, 1, 1}, 0.0),
                                 Obb({5, 5, 5}, {1, 1, 1}, 0.0), gts[0]};
        RoiLabels lab = label_rois(rois, gts);
        CHECK(lab.label == std::vector<int8_t>{0, 1, 0, 1});
        CHECK(lab.gt_index == std::vector<int32_t>{-1, 0, -1, 0});
    }
    SECTION("hand-computed refinement loss") {
        std::vector<Obb> gts = {Obb({5, 5, 5}, {2, 3, 2}, 0.3)};
        std::vector<Obb> rois = {gts[0], Obb({20, 20, 20}, {1, 1, 1}, 0.0)};
        RoiLabels lab = label_rois(rois, gts);
        std::vector<RoiOffset> targets(2);
        targets[0] = encode_roi(gts[0], rois[0]);
        std::vector<double> scores = {0.9, 0.4};
        std::vector<std::array<double, 7>> g(2);
        g[0] = targets[0].g;
        g[0][3] += 0.5;  // smooth-l1 0.125
        auto r = objectness_loss(scores, g, lab.label, targets, cfg);
        double cls = (-std::log(0.9) - std::log(0.6)) / 2.0;
        CHECK(r.breakdown.cls == Catch::Approx(cls).margin(1e-12));
        CHECK(r.breakdown.reg == Catch::Approx(5.0 * 0.125 / 1.0).margin(1e-12));
        CHECK(r.breakdown.n_reg == 1);
        double fd = oracle::central_diff(
            [&](const std::vector<double>& x) {
                auto g2 = g;
                g2[0][3] = x[0];
                return objectness_loss(scores, g2, lab.label, targets, cfg).breakdown.total;
            },
            {g[0][3]}, 0);
        CHECK(oracle::rel_err(r.dg[0][3], fd) < 1e-6);
    }
    SECTION("no object rois keeps only the classifier") {
        std::vector<double> scores = {0.2, 0.3};
        std::vector<std::array<double, 7>> g(2);
        std::vector<RoiOffset> targets(2);
        auto r = objectness_loss(scores, g, {0, 0}, targets, cfg);
        CHECK(r.breakdown.reg == 0.0);
        CHECK(std::isfinite(r.breakdown.total));
    }
}

TEST_CASE("projection loss", "[losses]") {
    Camera cam;
    cam.position = {0, 0, 0};
    cam.rotation = Mat3::identity();
    cam.focal = 10;
    cam.principal = {5, 5};
    cam.image_size = {10, 10};
    SECTION("prediction equal to target is free") {
        Obb b({0.3, -0.2, 4}, {1, 1.5, 2}, 0.4);
        auto r = proj_loss_2d({b}, {b}, {cam});
        CHECK(r.loss == 0.0);
        CHECK(r.n_box == 1);
    }
    SECTION("hand-computed single box") {
        Obb gt({0, 0, 4}, {1, 1, 2}, 0.0);
        Obb pred({0.5, 0, 4}, {1, 1, 2}, 0.0);
        auto r = proj_loss_2d({pred}, {gt}, {cam});
        CHECK(r.loss == Catch::Approx(20.0 / 3.0).margin(1e-12));
    }
    SECTION("pixel error scales with focal over depth") {
        auto loss_at_depth = [&](double d) {
            Obb gt({0, 0, d}, {1, 1, 1e-6}, 0.0);
            Obb pred({0.001, 0, d}, {1, 1, 1e-6}, 0.0);
            return proj_loss_2d({pred}, {gt}, {cam}).loss;
        };
        CHECK(loss_at_depth(5.0) / loss_at_depth(10.0) == Catch::Approx(4.0).margin(1e-6));
    }
    SECTION("fully hidden proposals drop out of the normalizer") {
        Obb vis_gt({0, 0, 4}, {1, 1, 2}, 0.0), vis({0.5, 0, 4}, {1, 1, 2}, 0.0);
        Obb hid({0, 0, -5}, {1, 1, 1}, 0.0);
        auto solo = proj_loss_2d({vis}, {vis_gt}, {cam});
        auto with_hidden = proj_loss_2d({vis, hid}, {vis_gt, hid}, {cam});
        CHECK(with_hidden.n_box == 1);
        CHECK(with_hidden.loss == solo.loss);
    }
    SECTION("corner pairs behind the camera are skipped") {
        Obb gt({0, 0, 0}, {1, 1, 2}, 0.0);  // straddles the camera plane
        Obb pred({0.3, 0, 0}, {1, 1, 2}, 0.0);
        auto r = proj_loss_2d({pred}, {gt}, {cam});
        // four front corners at depth 1, du = 3 each
        CHECK(r.loss == Catch::Approx(4 * 2.5).margin(1e-12));
    }
    SECTION("gradients match finite differences") {
        Obb gt({0.4, -0.3, 5}, {1.2, 1.5, 1.1}, 0.3);
        Obb pred({0.6, -0.1, 5.2}, {1.1, 1.4, 1.3}, 0.35);
        auto r = proj_loss_2d({pred}, {gt}, {cam});
        auto f = [&](const std::vector<double>& x) {
            return proj_loss_2d({box_from_params(x)}, {gt}, {cam}).loss;
        };
        for (size_t i = 0; i < 7; ++i) {
            double fd = oracle::central_diff(f, box_params(pred), i);
            bool ok = oracle::rel_err(r.dbox[0][i], fd) < 1e-5 ||
                      std::abs(r.dbox[0][i] - fd) < 1e-8;
            CHECK(ok);
        }
    }
}
