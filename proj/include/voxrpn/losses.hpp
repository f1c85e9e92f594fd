// Scalar losses with analytic gradients plus the composite objectives for
// both rpn heads, roi refinement and the 2d projection term. Gradients of
// box-overlap losses come from dual numbers pushed through the clipping
// pipeline; branch points contribute zero sub-gradient. Per-sample terms are
// reduced with a pairwise tree so totals are bit-stable for a fixed order.
#pragma once

#include <optional>

#include "voxrpn/encoding.hpp"

namespace voxrpn {

inline constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

struct LossGrad {
    double loss = 0, grad = 0;
};

inline LossGrad bce(double p, int pstar) {
    p = clamp_prob(p);
    if (pstar == 1) return {-std::log(p), -1.0 / p};
    return {-std::log(1.0 - p), 1.0 / (1.0 - p)};
}

// Cross entropy against a soft target, shifted by its minimum (the target
// entropy) so a perfect prediction reads exactly zero. The gradient is the
// plain cross-entropy one.
inline LossGrad bce_soft(double c, double cstar) {
    c = clamp_prob(c);
    cstar = clamp_prob(cstar);
    double loss = cstar * std::log(cstar / c) + (1.0 - cstar) * std::log((1.0 - cstar) / (1.0 - c));
    return {std::max(loss, 0.0), -cstar / c + (1.0 - cstar) / (1.0 - c)};
}

inline LossGrad smooth_l1(double x, double beta = 1.0) {
    double a = std::abs(x);
    if (a < beta) return {0.5 * x * x / beta, x / beta};
    return {a - 0.5 * beta, x > 0 ? 1.0 : -1.0};
}

template <class T>
T smooth_l1_t(const T& x, double beta) {
    T a = x < T(0.0) ? -x : x;
    if (value_of(a) < beta) return x * x * T(0.5 / beta);
    return a - T(0.5 * beta);
}

// alpha-balanced focal loss on probabilities
inline LossGrad focal(double p, int pstar, double gamma = 2.0, double alpha = 0.25) {
    p = clamp_prob(p);
    if (pstar == 1) {
        double q = 1.0 - p, lp = std::log(p), w = std::pow(q, gamma);
        return {-alpha * w * lp, -alpha * (w / p - gamma * std::pow(q, gamma - 1.0) * lp)};
    }
    double lq = std::log(1.0 - p), w = std::pow(p, gamma);
    return {-(1.0 - alpha) * w * lq,
            (1.0 - alpha) * (w / (1.0 - p) - gamma * std::pow(p, gamma - 1.0) * lq)};
}

enum class RegLoss { SmoothL1, IoU, DIoU };

struct LossConfig {
    double lambda_anchor = 5.0;
    double lambda_fcos = 1.0;
    double lambda_obj = 5.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double smooth_l1_beta = 1.0;
    RegLoss reg = RegLoss::IoU;

    void validate() const {
        require(lambda_anchor >= 0 && lambda_fcos >= 0 && lambda_obj >= 0,
                "loss config: lambdas must be non-negative");
        require(focal_gamma >= 0, "loss config: focal gamma must be non-negative");
        require(focal_alpha > 0 && focal_alpha < 1, "loss config: focal alpha in (0,1)");
        require(smooth_l1_beta > 0, "loss config: smooth-l1 beta must be positive");
    }
};

// ---- differentiable rotated overlap ----

namespace detail {

template <class T>
using Pt2 = std::array<T, 2>;

template <class T>
std::array<Pt2<T>, 4> obb_footprint_t(const ObbT<T>& b) {
    using std::cos;
    using std::sin;
    T c = cos(b.yaw), s = sin(b.yaw);
    T hw = b.size[0] * T(0.5), hl = b.size[1] * T(0.5);
    const double sx[4] = {-1, 1, 1, -1}, sy[4] = {-1, -1, 1, 1};
    std::array<Pt2<T>, 4> out;
    for (int i = 0; i < 4; ++i)
        out[i] = {b.center[0] + c * T(sx[i]) * hw - s * T(sy[i]) * hl,
                  b.center[1] + s * T(sx[i]) * hw + c * T(sy[i]) * hl};
    return out;
}

template <class T>
std::vector<Pt2<T>> clip_convex_t(std::vector<Pt2<T>> poly, const std::array<Pt2<T>, 4>& clip,
                                  double eps = 1e-12) {
    for (size_t e = 0; e < clip.size() && !poly.empty(); ++e) {
        const Pt2<T>& a = clip[e];
        const Pt2<T>& b = clip[(e + 1) % clip.size()];
        T dx = b[0] - a[0], dy = b[1] - a[1];
        std::vector<Pt2<T>> out;
        out.reserve(poly.size() + 4);
        for (size_t i = 0; i < poly.size(); ++i) {
            const Pt2<T>& p = poly[i];
            const Pt2<T>& q = poly[(i + 1) % poly.size()];
            T dp = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
            T dq = dx * (q[1] - a[1]) - dy * (q[0] - a[0]);
            bool pin = value_of(dp) >= -eps, qin = value_of(dq) >= -eps;
            if (pin) out.push_back(p);
            if (pin != qin) {
                T t = dp / (dp - dq);
                out.push_back({p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t});
            }
        }
        poly = std::move(out);
    }
    return poly;
}

template <class T>
T polygon_area_t(const std::vector<Pt2<T>>& p) {
    T s(0.0);
    for (size_t i = 0; i < p.size(); ++i) {
        const Pt2<T>& a = p[i];
        const Pt2<T>& b = p[(i + 1) % p.size()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    return s * T(0.5);
}

template <int N>
ObbT<Dual<N>> lift_box(const Obb& b) {
    return {{Dual<N>(b.center.x), Dual<N>(b.center.y), Dual<N>(b.center.z)},
            {Dual<N>(b.size.x), Dual<N>(b.size.y), Dual<N>(b.size.z)},
            Dual<N>(b.yaw)};
}

inline ObbT<Dual<7>> seed_box(const Obb& b) {
    using D = Dual<7>;
    return {{D::seed(b.center.x, 0), D::seed(b.center.y, 1), D::seed(b.center.z, 2)},
            {D::seed(b.size.x, 3), D::seed(b.size.y, 4), D::seed(b.size.z, 5)},
            D::seed(b.yaw, 6)};
}

}  // namespace detail

template <class T>
T rotated_iou_t(const ObbT<T>& a, const ObbT<T>& b) {
    using std::max;
    using std::min;
    T dz = min(a.center[2] + a.size[2] * T(0.5), b.center[2] + b.size[2] * T(0.5)) -
           max(a.center[2] - a.size[2] * T(0.5), b.center[2] - b.size[2] * T(0.5));
    if (value_of(dz) <= 0) return T(0.0);
    auto fa = detail::obb_footprint_t(a);
    auto fb = detail::obb_footprint_t(b);
    auto inter = detail::clip_convex_t<T>({fa.begin(), fa.end()}, fb);
    if (inter.size() < 3) return T(0.0);
    T ar = detail::polygon_area_t(inter);
    if (value_of(ar) < 0) ar = -ar;
    T vi = ar * dz;
    T vu = a.size[0] * a.size[1] * a.size[2] + b.size[0] * b.size[1] * b.size[2] - vi;
    T iou = vi / vu;
    if (value_of(iou) < 0) return T(0.0);
    if (value_of(iou) > 1) return T(1.0);
    return iou;
}

template <class T>
T diou_penalty_t(const ObbT<T>& a, const ObbT<T>& b) {
    using std::max;
    using std::min;
    auto ca = obb_corners_t(a);
    auto cb = obb_corners_t(b);
    std::array<T, 3> lo = ca[0], hi = ca[0];
    for (int i = 1; i < 8; ++i)
        for (int k = 0; k < 3; ++k) {
            lo[k] = min(lo[k], ca[i][k]);
            hi[k] = max(hi[k], ca[i][k]);
        }
    for (int i = 0; i < 8; ++i)
        for (int k = 0; k < 3; ++k) {
            lo[k] = min(lo[k], cb[i][k]);
            hi[k] = max(hi[k], cb[i][k]);
        }
    T d2(0.0), g2(0.0);
    for (int k = 0; k < 3; ++k) {
        T d = a.center[k] - b.center[k];
        T g = hi[k] - lo[k];
        d2 += d * d;
        g2 += g * g;
    }
    return d2 / g2;
}

struct BoxLossGrad {
    double loss = 0;
    std::array<double, 7> grad{};  // d/d(center, size, yaw) of the prediction
};

inline BoxLossGrad iou_loss(const Obb& pred, const Obb& gt) {
    Dual<7> loss = Dual<7>(1.0) - rotated_iou_t(detail::seed_box(pred), detail::lift_box<7>(gt));
    return {loss.v, loss.d};
}

inline BoxLossGrad diou_loss(const Obb& pred, const Obb& gt) {
    auto p = detail::seed_box(pred);
    auto g = detail::lift_box<7>(gt);
    Dual<7> loss = Dual<7>(1.0) - rotated_iou_t(p, g) + diou_penalty_t(p, g);
    return {loss.v, loss.d};
}

// ---- composite objectives ----

struct LossBreakdown {
    double cls = 0, reg = 0, total = 0;
    std::optional<double> ctr, proj;
    int n_pos = 0, n_cls = 0, n_reg = 0;
};

inline json breakdown_to_json(const LossBreakdown& b) {
    json j{{"cls", b.cls},     {"reg", b.reg},     {"total", b.total},
           {"n_pos", b.n_pos}, {"n_cls", b.n_cls}, {"n_reg", b.n_reg}};
    if (b.ctr) j["ctr"] = *b.ctr;
    if (b.proj) j["proj"] = *b.proj;
    return j;
}

struct Reg8 {
    double loss = 0;
    std::array<double, 8> grad{};
};

// regression loss on one anchor, gradient w.r.t. the 8 raw offsets
inline Reg8 anchor_reg_loss(const std::array<double, 8>& t, const AnchorDelta& tstar,
                            const Anchor& a, const Obb& gt, const LossConfig& cfg) {
    Reg8 r;
    if (cfg.reg == RegLoss::SmoothL1) {
        for (int i = 0; i < 8; ++i) {
            LossGrad s = smooth_l1(t[i] - tstar.t[i], cfg.smooth_l1_beta);
            r.loss += s.loss;
            r.grad[i] = s.grad;
        }
        return r;
    }
    using D = Dual<8>;
    std::array<D, 8> td;
    for (int i = 0; i < 8; ++i) td[i] = D::seed(t[i], i);
    ObbT<D> box = decode_anchor_t(td, a);
    ObbT<D> g = detail::lift_box<8>(gt);
    D loss = D(1.0) - rotated_iou_t(box, g);
    if (cfg.reg == RegLoss::DIoU) loss += diou_penalty_t(box, g);
    return {loss.v, loss.d};
}

inline Reg8 fcos_reg_loss(const std::array<double, 8>& t, const FcosTarget& tstar, const Vec3& pos,
                          const Obb& gt, const LossConfig& cfg) {
    Reg8 r;
    if (cfg.reg == RegLoss::SmoothL1) {
        for (int i = 0; i < 8; ++i) {
            LossGrad s = smooth_l1(t[i] - tstar.t[i], cfg.smooth_l1_beta);
            r.loss += s.loss;
            r.grad[i] = s.grad;
        }
        return r;
    }
    using D = Dual<8>;
    std::array<D, 8> td;
    for (int i = 0; i < 8; ++i) td[i] = D::seed(t[i], i);
    ObbT<D> box = decode_fcos_t(pos, td);
    ObbT<D> g = detail::lift_box<8>(gt);
    D loss = D(1.0) - rotated_iou_t(box, g);
    if (cfg.reg == RegLoss::DIoU) loss += diou_penalty_t(box, g);
    return {loss.v, loss.d};
}

struct AnchorLossGrads {
    LossBreakdown breakdown;
    std::vector<double> dp;
    std::vector<std::array<double, 8>> dt;
};

// (1/N_cls) sum bce + (lambda/N_reg) sum of positive regression terms, over
// the sampled minibatch only
inline AnchorLossGrads rpn_loss_anchor(const std::vector<double>& p,
                                       const std::vector<std::array<double, 8>>& t,
                                       const std::vector<Anchor>& anchors,
                                       const AssignmentResult& as, const Minibatch& mb,
                                       const std::vector<Obb>& gts, const LossConfig& cfg) {
    cfg.validate();
    size_t n = anchors.size();
    require(p.size() == n && t.size() == n && as.label.size() == n, "anchor loss: size mismatch");
    int n_cls = int(mb.pos.size() + mb.neg.size());
    require(n_cls > 0, "anchor loss: empty minibatch");
    int n_reg = int(mb.pos.size());
    AnchorLossGrads out;
    out.dp.assign(n, 0.0);
    out.dt.assign(n, {});
    std::vector<double> cls_terms, reg_terms;
    for (uint32_t i : mb.pos) {
        LossGrad b = bce(p[i], 1);
        cls_terms.push_back(b.loss);
        out.dp[i] += b.grad / n_cls;
    }
    for (uint32_t i : mb.neg) {
        require(as.label[i] == 0, "anchor loss: sampled negative not labeled negative");
        LossGrad b = bce(p[i], 0);
        cls_terms.push_back(b.loss);
        out.dp[i] += b.grad / n_cls;
    }
    double reg_scale = n_reg > 0 ? cfg.lambda_anchor / n_reg : 0.0;
    for (uint32_t i : mb.pos) {
        require(as.label[i] == 1 && as.gt_index[i] >= 0, "anchor loss: bad positive sample");
        const Obb& gt = gts.at(size_t(as.gt_index[i]));
        Reg8 rr = anchor_reg_loss(t[i], encode_anchor(gt, anchors[i]), anchors[i], gt, cfg);
        reg_terms.push_back(rr.loss);
        for (int k = 0; k < 8; ++k) out.dt[i][k] += rr.grad[k] * reg_scale;
    }
    out.breakdown.cls = pairwise_sum(cls_terms) / n_cls;
    out.breakdown.reg = pairwise_sum(reg_terms) * reg_scale;
    out.breakdown.total = out.breakdown.cls + out.breakdown.reg;
    out.breakdown.n_pos = n_reg;
    out.breakdown.n_cls = n_cls;
    out.breakdown.n_reg = n_reg;
    return out;
}

struct FcosLossGrads {
    LossBreakdown breakdown;
    std::vector<double> dp, dc;
    std::vector<std::array<double, 8>> dt;
};

// (1/N_pos) [ sum focal over all voxels + lambda sum reg + sum centerness
// bce over positives ]; an empty positive set keeps the focal term with
// normalizer 1
inline FcosLossGrads rpn_loss_fcos(const std::vector<double>& p,
                                   const std::vector<std::array<double, 8>>& t,
                                   const std::vector<double>& c,
                                   const std::vector<FcosTarget>& targets,
                                   const std::vector<Vec3>& positions, const std::vector<Obb>& gts,
                                   const LossConfig& cfg) {
    cfg.validate();
    size_t n = targets.size();
    require(p.size() == n && t.size() == n && c.size() == n && positions.size() == n,
            "fcos loss: size mismatch");
    int n_pos = 0;
    for (const FcosTarget& tg : targets) n_pos += tg.label == 1;
    double norm = std::max(n_pos, 1);
    FcosLossGrads out;
    out.dp.assign(n, 0.0);
    out.dc.assign(n, 0.0);
    out.dt.assign(n, {});
    std::vector<double> cls_terms, reg_terms, ctr_terms;
    for (size_t i = 0; i < n; ++i) {
        LossGrad f = focal(p[i], targets[i].label, cfg.focal_gamma, cfg.focal_alpha);
        cls_terms.push_back(f.loss);
        out.dp[i] = f.grad / norm;
    }
    double reg_scale = cfg.lambda_fcos / norm;
    for (size_t i = 0; i < n; ++i) {
        if (targets[i].label != 1) continue;
        const Obb& gt = gts.at(size_t(targets[i].gt_index));
        Reg8 rr = fcos_reg_loss(t[i], targets[i], positions[i], gt, cfg);
        reg_terms.push_back(rr.loss);
        for (int k = 0; k < 8; ++k) out.dt[i][k] = rr.grad[k] * reg_scale;
        LossGrad cb = bce_soft(c[i], targets[i].cstar);
        ctr_terms.push_back(cb.loss);
        out.dc[i] = cb.grad / norm;
    }
    out.breakdown.cls = pairwise_sum(cls_terms) / norm;
    out.breakdown.reg = pairwise_sum(reg_terms) * reg_scale;
    out.breakdown.ctr = pairwise_sum(ctr_terms) / norm;
    out.breakdown.total = out.breakdown.cls + out.breakdown.reg + *out.breakdown.ctr;
    out.breakdown.n_pos = n_pos;
    out.breakdown.n_cls = int(n);
    out.breakdown.n_reg = n_pos;
    return out;
}

struct RoiLabels {
    std::vector<int8_t> label;      // 1 object, 0 background
    std::vector<int32_t> gt_index;  // argmax overlap, -1 for background
};

inline RoiLabels label_rois(const std::vector<Obb>& rois, const std::vector<Obb>& gts,
                            double thresh = 0.25) {
    RoiLabels out;
    out.label.assign(rois.size(), 0);
    out.gt_index.assign(rois.size(), -1);
    for (size_t i = 0; i < rois.size(); ++i) {
        double best = 0;
        int32_t arg = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            double iou = rotated_iou(rois[i], gts[g]);
            if (iou > best) {
                best = iou;
                arg = int32_t(g);
            }
        }
        if (best > thresh) {
            out.label[i] = 1;
            out.gt_index[i] = arg;
        }
    }
    return out;
}

struct RefineLossGrads {
    LossBreakdown breakdown;
    std::vector<double> ds;
    std::vector<std::array<double, 7>> dg;
};

// bce on object/background over all rois plus lambda-weighted smooth-l1 on
// the 7 offsets of object rois
inline RefineLossGrads objectness_loss(const std::vector<double>& scores,
                                       const std::vector<std::array<double, 7>>& g,
                                       const std::vector<int8_t>& labels,
                                       const std::vector<RoiOffset>& targets,
                                       const LossConfig& cfg) {
    cfg.validate();
    size_t n = scores.size();
    require(g.size() == n && labels.size() == n && targets.size() == n,
            "objectness loss: size mismatch");
    require(n > 0, "objectness loss: no rois");
    int n_reg = 0;
    for (int8_t l : labels) n_reg += l == 1;
    RefineLossGrads out;
    out.ds.assign(n, 0.0);
    out.dg.assign(n, {});
    std::vector<double> cls_terms, reg_terms;
    double reg_scale = n_reg > 0 ? cfg.lambda_obj / n_reg : 0.0;
    for (size_t i = 0; i < n; ++i) {
        LossGrad b = bce(scores[i], labels[i]);
        cls_terms.push_back(b.loss);
        out.ds[i] = b.grad / double(n);
        if (labels[i] != 1) continue;
        double sample = 0;
        for (int k = 0; k < 7; ++k) {
            LossGrad s = smooth_l1(g[i][k] - targets[i].g[k], cfg.smooth_l1_beta);
            sample += s.loss;
            out.dg[i][k] = s.grad * reg_scale;
        }
        reg_terms.push_back(sample);
    }
    out.breakdown.cls = pairwise_sum(cls_terms) / double(n);
    out.breakdown.reg = pairwise_sum(reg_terms) * reg_scale;
    out.breakdown.total = out.breakdown.cls + out.breakdown.reg;
    out.breakdown.n_pos = n_reg;
    out.breakdown.n_cls = int(n);
    out.breakdown.n_reg = n_reg;
    return out;
}

struct ProjLossGrads {
    double loss = 0;
    std::vector<std::array<double, 7>> dbox;
    int n_box = 0;  // proposals with at least one corner pair in front of a camera
};

// smooth-l1 between index-matched projected corners, averaged over cameras
// and visible proposals; corner pairs behind a camera are skipped
inline ProjLossGrads proj_loss_2d(const std::vector<Obb>& pred, const std::vector<Obb>& matched,
                                  const std::vector<Camera>& cams, double beta = 1.0) {
    require(pred.size() == matched.size(), "projection loss: one target per proposal");
    require(!cams.empty(), "projection loss: no cameras");
    for (const Camera& c : cams) c.validate();
    using D = Dual<7>;
    ProjLossGrads out;
    out.dbox.assign(pred.size(), {});
    std::vector<D> per_box(pred.size(), D(0.0));
    std::vector<bool> any(pred.size(), false);
    for (size_t i = 0; i < pred.size(); ++i) {
        auto pc = obb_corners_t(detail::seed_box(pred[i]));
        auto gc = obb_corners(matched[i]);
        for (const Camera& cam : cams) {
            Vec3 fwd = cam.rotation.row(2);
            for (int k = 0; k < 8; ++k) {
                double zg = fwd.dot(gc[k] - cam.position);
                D zp = D(fwd.x) * (pc[k][0] - D(cam.position.x)) +
                       D(fwd.y) * (pc[k][1] - D(cam.position.y)) +
                       D(fwd.z) * (pc[k][2] - D(cam.position.z));
                if (zg <= 0 || zp.v <= 0) continue;
                auto pp = project_point<D>(cam, pc[k]);
                auto gp = project_point<double>(cam, {gc[k].x, gc[k].y, gc[k].z});
                per_box[i] += smooth_l1_t(pp[0] - D(gp[0]), beta) +
                              smooth_l1_t(pp[1] - D(gp[1]), beta);
                any[i] = true;
            }
        }
    }
    for (bool a : any) out.n_box += a;
    if (out.n_box == 0) return out;
    double scale = 1.0 / (double(cams.size()) * out.n_box);
    std::vector<double> terms;
    for (size_t i = 0; i < pred.size(); ++i) {
        terms.push_back(per_box[i].v);
        for (int k = 0; k < 7; ++k) out.dbox[i][k] = per_box[i].d[k] * scale;
    }
    out.loss = pairwise_sum(terms) * scale;
    return out;
}

}  // namespace voxrpn
