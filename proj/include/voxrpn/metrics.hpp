#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "proposals.hpp"

namespace voxrpn {

// Greedy score-ordered matching: each proposal takes the highest-IoU ground
// truth box that is still free, provided the IoU clears the threshold.
struct MatchResult {
    std::vector<uint8_t> tp;        // per proposal
    std::vector<int32_t> gt_match;  // per gt: proposal index or -1
};

inline MatchResult match(const std::vector<Proposal>& proposals, const std::vector<Obb>& gts,
                         double iou_thresh) {
    require(iou_thresh > 0 && iou_thresh < 1, "match: iou threshold in (0,1)");
    for (size_t i = 1; i < proposals.size(); ++i)
        require(proposals[i - 1].score >= proposals[i].score,
                "match: proposals must be sorted by descending score");
    MatchResult m;
    m.tp.assign(proposals.size(), 0);
    m.gt_match.assign(gts.size(), -1);
    for (size_t i = 0; i < proposals.size(); ++i) {
        double best = 0.0;
        int32_t best_g = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (m.gt_match[g] >= 0) continue;
            double iou = rotated_iou(proposals[i].box, gts[g]);
            if (iou > best) {
                best = iou;
                best_g = int32_t(g);
            }
        }
        if (best_g >= 0 && best >= iou_thresh) {
            m.tp[i] = 1;
            m.gt_match[size_t(best_g)] = int32_t(i);
        }
    }
    return m;
}

namespace detail {

inline std::vector<Proposal> sorted_by_score(std::vector<Proposal> ps) {
    std::stable_sort(ps.begin(), ps.end(),
                     [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    return ps;
}

}  // namespace detail

inline double recall_at(const std::vector<Proposal>& proposals, const std::vector<Obb>& gts,
                        double tau) {
    require(!gts.empty(), "recall: no ground truth boxes");
    MatchResult m = match(detail::sorted_by_score(proposals), gts, tau);
    size_t hit = 0;
    for (int32_t g : m.gt_match) hit += g >= 0;
    return double(hit) / double(gts.size());
}

// Area under the precision-recall curve with the precision envelope
// (all-points interpolation).
inline double average_precision(const std::vector<Proposal>& proposals,
                                const std::vector<Obb>& gts, double tau) {
    require(!gts.empty(), "average precision: no ground truth boxes");
    std::vector<Proposal> ranked = detail::sorted_by_score(proposals);
    MatchResult m = match(ranked, gts, tau);
    std::vector<double> prec, rec;
    size_t tp = 0;
    for (size_t i = 0; i < ranked.size(); ++i) {
        tp += m.tp[i];
        prec.push_back(double(tp) / double(i + 1));
        rec.push_back(double(tp) / double(gts.size()));
    }
    double ap = 0.0, envelope = 0.0;
    for (size_t i = ranked.size(); i-- > 0;) {
        envelope = std::max(envelope, prec[i]);
        double r_lo = i > 0 ? rec[i - 1] : 0.0;
        ap += (rec[i] - r_lo) * envelope;
    }
    return ap;
}

struct SceneEval {
    int64_t n_proposals = 0;
    int64_t n_gts = 0;
    double recall25 = 0, recall50 = 0;
    double ap25 = 0, ap50 = 0;
};

struct EvalReport {
    double recall25 = 0, recall50 = 0;
    double ap25 = 0, ap50 = 0;
    int64_t total_proposals = 0, total_gts = 0;
    std::vector<SceneEval> scenes;
};

// Aggregates weight each scene by its ground-truth count, so a metric over the
// report equals the same metric over the pooled per-gt outcomes.
inline EvalReport evaluate(const std::vector<std::vector<Proposal>>& proposals,
                           const std::vector<std::vector<Obb>>& gts) {
    require(proposals.size() == gts.size(), "evaluate: one proposal set per scene");
    require(!gts.empty(), "evaluate: no scenes");
    EvalReport rep;
    double w = 0;
    for (size_t s = 0; s < gts.size(); ++s) {
        SceneEval sc;
        sc.n_proposals = int64_t(proposals[s].size());
        sc.n_gts = int64_t(gts[s].size());
        sc.recall25 = recall_at(proposals[s], gts[s], 0.25);
        sc.recall50 = recall_at(proposals[s], gts[s], 0.50);
        sc.ap25 = average_precision(proposals[s], gts[s], 0.25);
        sc.ap50 = average_precision(proposals[s], gts[s], 0.50);
        rep.total_proposals += sc.n_proposals;
        rep.total_gts += sc.n_gts;
        double g = double(sc.n_gts);
        rep.recall25 += g * sc.recall25;
        rep.recall50 += g * sc.recall50;
        rep.ap25 += g * sc.ap25;
        rep.ap50 += g * sc.ap50;
        w += g;
        rep.scenes.push_back(sc);
    }
    rep.recall25 /= w;
    rep.recall50 /= w;
    rep.ap25 /= w;
    rep.ap50 /= w;
    return rep;
}

inline json scene_eval_to_json(const SceneEval& s) {
    return json{{"proposals", s.n_proposals}, {"gts", s.n_gts},
                {"recall25", s.recall25},     {"recall50", s.recall50},
                {"ap25", s.ap25},             {"ap50", s.ap50}};
}

inline json eval_report_to_json(const EvalReport& r) {
    json scenes = json::array();
    for (const SceneEval& s : r.scenes) scenes.push_back(scene_eval_to_json(s));
    return json{{"recall25", r.recall25},
                {"recall50", r.recall50},
                {"ap25", r.ap25},
                {"ap50", r.ap50},
                {"proposals", r.total_proposals},
                {"gts", r.total_gts},
                {"scenes", std::move(scenes)}};
}

inline EvalReport eval_report_from_json(const json& j) {
    check_keys(j, {"recall25", "recall50", "ap25", "ap50", "proposals", "gts", "scenes"}, {},
               "eval report");
    EvalReport r;
    r.recall25 = finite_number(j.at("recall25"), "recall25");
    r.recall50 = finite_number(j.at("recall50"), "recall50");
    r.ap25 = finite_number(j.at("ap25"), "ap25");
    r.ap50 = finite_number(j.at("ap50"), "ap50");
    r.total_proposals = j.at("proposals").get<int64_t>();
    r.total_gts = j.at("gts").get<int64_t>();
    for (const json& js : j.at("scenes")) {
        check_keys(js, {"proposals", "gts", "recall25", "recall50", "ap25", "ap50"}, {},
                   "scene eval");
        SceneEval s;
        s.n_proposals = js.at("proposals").get<int64_t>();
        s.n_gts = js.at("gts").get<int64_t>();
        s.recall25 = finite_number(js.at("recall25"), "recall25");
        s.recall50 = finite_number(js.at("recall50"), "recall50");
        s.ap25 = finite_number(js.at("ap25"), "ap25");
        s.ap50 = finite_number(js.at("ap50"), "ap50");
        r.scenes.push_back(s);
    }
    return r;
}

// one row per scene plus an aggregate row, for plotting
inline std::string eval_report_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "scene,proposals,gts,recall25,recall50,ap25,ap50\n";
    for (size_t i = 0; i < r.scenes.size(); ++i) {
        const SceneEval& s = r.scenes[i];
        os << i << ',' << s.n_proposals << ',' << s.n_gts << ',' << s.recall25 << ','
           << s.recall50 << ',' << s.ap25 << ',' << s.ap50 << '\n';
    }
    os << "all," << r.total_proposals << ',' << r.total_gts << ',' << r.recall25 << ','
       << r.recall50 << ',' << r.ap25 << ',' << r.ap50 << '\n';
    return os.str();
}

}  // namespace voxrpn
