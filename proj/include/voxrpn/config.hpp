#pragma once

#include <array>
#include <string>
#include <vector>

#include "proposals.hpp"
#include "train.hpp"

// One JSON document drives a whole run. Constants that come from the method
// being reproduced (loss weights, iou thresholds, top-k, minibatch size, ...)
// live here as defaults and nowhere else in the tool layer, so a config file
// plus a seed pins an experiment completely.

namespace voxrpn {

inline constexpr int kRunConfigVersion = 1;

namespace detail {

inline double num_or(const json& j, const char* key, double fallback) {
    return j.contains(key) ? finite_number(j.at(key), key) : fallback;
}

inline int int_or(const json& j, const char* key, int fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    require(v.is_number_integer(), std::string(key) + ": expected an integer");
    return v.get<int>();
}

inline bool bool_or(const json& j, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    require(j.at(key).is_boolean(), std::string(key) + ": expected a boolean");
    return j.at(key).get<bool>();
}

inline Vec3 vec3_or(const json& j, const char* key, Vec3 fallback) {
    return j.contains(key) ? vec3_from_json(j.at(key), key) : fallback;
}

}  // namespace detail

struct SceneSection {
    SynthConfig synth;
    int count = 10;       // scenes per synth run
    int holdout = 0;      // extra held-out scenes appended after the first `count`

    void validate() const {
        synth.validate();
        require(count >= 1, "scene: count >= 1");
        require(holdout >= 0, "scene: holdout >= 0");
    }
};

inline json scene_section_to_json(const SceneSection& s) {
    return json{{"room_size", to_json(s.synth.room_size)},
                {"min_objects", s.synth.min_objects},
                {"max_objects", s.synth.max_objects},
                {"min_size", to_json(s.synth.min_size)},
                {"max_size", to_json(s.synth.max_size)},
                {"yaw_range", s.synth.yaw_range},
                {"sigma_min", s.synth.sigma_min},
                {"sigma_max", s.synth.sigma_max},
                {"ambient_sigma", s.synth.ambient_sigma},
                {"hollow", s.synth.hollow},
                {"shell", s.synth.shell},
                {"count", s.count},
                {"holdout", s.holdout}};
}

inline SceneSection scene_section_from_json(const json& j) {
    check_keys(j,
               {},
               {"room_size", "min_objects", "max_objects", "min_size", "max_size", "yaw_range",
                "sigma_min", "sigma_max", "ambient_sigma", "hollow", "shell", "count", "holdout"},
               "scene section");
    SceneSection s;
    s.synth.room_size = detail::vec3_or(j, "room_size", s.synth.room_size);
    s.synth.min_objects = detail::int_or(j, "min_objects", s.synth.min_objects);
    s.synth.max_objects = detail::int_or(j, "max_objects", s.synth.max_objects);
    s.synth.min_size = detail::vec3_or(j, "min_size", s.synth.min_size);
    s.synth.max_size = detail::vec3_or(j, "max_size", s.synth.max_size);
    s.synth.yaw_range = detail::num_or(j, "yaw_range", s.synth.yaw_range);
    s.synth.sigma_min = detail::num_or(j, "sigma_min", s.synth.sigma_min);
    s.synth.sigma_max = detail::num_or(j, "sigma_max", s.synth.sigma_max);
    s.synth.ambient_sigma = detail::num_or(j, "ambient_sigma", s.synth.ambient_sigma);
    s.synth.hollow = detail::bool_or(j, "hollow", s.synth.hollow);
    s.synth.shell = detail::num_or(j, "shell", s.synth.shell);
    s.count = detail::int_or(j, "count", s.count);
    s.holdout = detail::int_or(j, "holdout", s.holdout);
    return s;
}

struct SamplingSection {
    SamplingStrategy::Kind kind = SamplingStrategy::Kind::DensityOnly;
    std::array<int, 3> dims{48, 48, 48};
    int sh_dirs = 300;

    void validate() const {
        for (int d : dims) require(d >= 1, "sampling: dims >= 1");
        require(sh_dirs >= 1, "sampling: sh_dirs >= 1");
    }
};

inline std::string sampling_kind_name(SamplingStrategy::Kind k) {
    switch (k) {
        case SamplingStrategy::Kind::DensityOnly: return "density";
        case SamplingStrategy::Kind::Fixed18: return "fixed18";
        case SamplingStrategy::Kind::CameraAvg: return "camera_avg";
        case SamplingStrategy::Kind::FrustumAvg: return "frustum_avg";
        case SamplingStrategy::Kind::Sh3: return "sh3";
    }
    throw std::logic_error("unreachable sampling kind");
}

inline SamplingStrategy::Kind sampling_kind_from_name(const std::string& s) {
    if (s == "density") return SamplingStrategy::Kind::DensityOnly;
    if (s == "fixed18") return SamplingStrategy::Kind::Fixed18;
    if (s == "camera_avg") return SamplingStrategy::Kind::CameraAvg;
    if (s == "frustum_avg") return SamplingStrategy::Kind::FrustumAvg;
    if (s == "sh3") return SamplingStrategy::Kind::Sh3;
    throw std::invalid_argument("sampling: unknown kind '" + s + "'");
}

inline json sampling_section_to_json(const SamplingSection& s) {
    return json{{"kind", sampling_kind_name(s.kind)},
                {"dims", {s.dims[0], s.dims[1], s.dims[2]}},
                {"sh_dirs", s.sh_dirs}};
}

inline SamplingSection sampling_section_from_json(const json& j) {
    check_keys(j, {}, {"kind", "dims", "sh_dirs"}, "sampling section");
    SamplingSection s;
    if (j.contains("kind")) s.kind = sampling_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("dims")) {
        const json& d = j.at("dims");
        require(d.is_array() && d.size() == 3, "sampling: dims must be [w,l,h]");
        for (int a = 0; a < 3; ++a) s.dims[size_t(a)] = d[size_t(a)].get<int>();
    }
    s.sh_dirs = detail::int_or(j, "sh_dirs", s.sh_dirs);
    return s;
}

struct AnchorSection {
    std::vector<double> shortest;  // per pyramid level; empty = 3x level stride
    double pos_iou = 0.35;
    double neg_iou = 0.2;

    void validate() const {
        for (double s : shortest) require(s > 0, "anchors: shortest sides must be positive");
        require(neg_iou >= 0 && pos_iou > neg_iou && pos_iou < 1,
                "anchors: need 0 <= neg_iou < pos_iou < 1");
    }
};

inline json anchor_section_to_json(const AnchorSection& a) {
    return json{{"shortest", a.shortest}, {"pos_iou", a.pos_iou}, {"neg_iou", a.neg_iou}};
}

inline AnchorSection anchor_section_from_json(const json& j) {
    check_keys(j, {}, {"shortest", "pos_iou", "neg_iou"}, "anchors section");
    AnchorSection a;
    if (j.contains("shortest"))
        for (const json& v : j.at("shortest")) a.shortest.push_back(finite_number(v, "shortest"));
    a.pos_iou = detail::num_or(j, "pos_iou", a.pos_iou);
    a.neg_iou = detail::num_or(j, "neg_iou", a.neg_iou);
    return a;
}

inline json head_section_to_json(const NetConfig& n) {
    return json{{"kind", head_kind_name(n.head)},
                {"in_channels", n.in_channels},
                {"stage_channels", n.stage_channels},
                {"stage_strides", n.stage_strides},
                {"fpn_stages", n.fpn_stages},
                {"fpn_channels", n.fpn_channels},
                {"head_convs", n.head_convs},
                {"anchors_per_voxel", n.anchors_per_voxel}};
}

inline NetConfig head_section_from_json(const json& j) {
    check_keys(j,
               {},
               {"kind", "in_channels", "stage_channels", "stage_strides", "fpn_stages",
                "fpn_channels", "head_convs", "anchors_per_voxel"},
               "head section");
    NetConfig n;
    if (j.contains("kind")) n.head = head_kind_from(j.at("kind").get<std::string>());
    n.in_channels = detail::int_or(j, "in_channels", n.in_channels);
    if (j.contains("stage_channels")) n.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    if (j.contains("stage_strides")) n.stage_strides = j.at("stage_strides").get<std::vector<int>>();
    if (j.contains("fpn_stages")) n.fpn_stages = j.at("fpn_stages").get<std::vector<int>>();
    n.fpn_channels = detail::int_or(j, "fpn_channels", n.fpn_channels);
    n.head_convs = detail::int_or(j, "head_convs", n.head_convs);
    n.anchors_per_voxel = detail::int_or(j, "anchors_per_voxel", n.anchors_per_voxel);
    return n;
}

inline std::string reg_loss_name(RegLoss r) {
    switch (r) {
        case RegLoss::SmoothL1: return "smooth_l1";
        case RegLoss::IoU: return "iou";
        case RegLoss::DIoU: return "diou";
    }
    throw std::logic_error("unreachable reg loss");
}

inline RegLoss reg_loss_from_name(const std::string& s) {
    if (s == "smooth_l1") return RegLoss::SmoothL1;
    if (s == "iou") return RegLoss::IoU;
    if (s == "diou") return RegLoss::DIoU;
    throw std::invalid_argument("loss: unknown reg kind '" + s + "'");
}

struct TrainSection {
    int steps = 500;
    double lr = 3e-4;
    double wd = 1e-3;
    int minibatch = 256;
    double pos_fraction = 0.5;
    bool augment = true;
    AugmentSpec aug;
    LossConfig loss;
    bool reg_given = false;  // reg defaults per head when the config stays silent
    double proj_weight = 0.0;
    int checkpoint_every = 0;

    void validate() const {
        require(steps >= 0, "train: steps >= 0");
        require(lr > 0 && wd >= 0, "train: lr > 0 and wd >= 0");
        require(minibatch >= 1, "train: minibatch >= 1");
        require(pos_fraction >= 0 && pos_fraction <= 1, "train: pos_fraction in [0,1]");
        require(proj_weight >= 0, "train: proj_weight >= 0");
        require(checkpoint_every >= 0, "train: checkpoint_every >= 0");
        aug.validate();
        loss.validate();
    }
};

inline json train_section_to_json(const TrainSection& t) {
    return json{{"steps", t.steps},
                {"lr", t.lr},
                {"wd", t.wd},
                {"minibatch", t.minibatch},
                {"pos_fraction", t.pos_fraction},
                {"augment", t.augment},
                {"flip_x_prob", t.aug.flip_x_prob},
                {"flip_y_prob", t.aug.flip_y_prob},
                {"rot90_prob", t.aug.rot90_prob},
                {"jitter_prob", t.aug.jitter_prob},
                {"jitter_range", t.aug.jitter_range},
                {"lambda_anchor", t.loss.lambda_anchor},
                {"lambda_fcos", t.loss.lambda_fcos},
                {"lambda_obj", t.loss.lambda_obj},
                {"focal_gamma", t.loss.focal_gamma},
                {"focal_alpha", t.loss.focal_alpha},
                {"smooth_l1_beta", t.loss.smooth_l1_beta},
                {"reg_loss", reg_loss_name(t.loss.reg)},
                {"proj_weight", t.proj_weight},
                {"checkpoint_every", t.checkpoint_every}};
}

inline TrainSection train_section_from_json(const json& j) {
    check_keys(j,
               {},
               {"steps", "lr", "wd", "minibatch", "pos_fraction", "augment", "flip_x_prob",
                "flip_y_prob", "rot90_prob", "jitter_prob", "jitter_range", "lambda_anchor",
                "lambda_fcos", "lambda_obj", "focal_gamma", "focal_alpha", "smooth_l1_beta",
                "reg_loss", "proj_weight", "checkpoint_every"},
               "train section");
    TrainSection t;
    t.steps = detail::int_or(j, "steps", t.steps);
    t.lr = detail::num_or(j, "lr", t.lr);
    t.wd = detail::num_or(j, "wd", t.wd);
    t.minibatch = detail::int_or(j, "minibatch", t.minibatch);
    t.pos_fraction = detail::num_or(j, "pos_fraction", t.pos_fraction);
    t.augment = detail::bool_or(j, "augment", t.augment);
    t.aug.flip_x_prob = detail::num_or(j, "flip_x_prob", t.aug.flip_x_prob);
    t.aug.flip_y_prob = detail::num_or(j, "flip_y_prob", t.aug.flip_y_prob);
    t.aug.rot90_prob = detail::num_or(j, "rot90_prob", t.aug.rot90_prob);
    t.aug.jitter_prob = detail::num_or(j, "jitter_prob", t.aug.jitter_prob);
    t.aug.jitter_range = detail::num_or(j, "jitter_range", t.aug.jitter_range);
    t.loss.lambda_anchor = detail::num_or(j, "lambda_anchor", t.loss.lambda_anchor);
    t.loss.lambda_fcos = detail::num_or(j, "lambda_fcos", t.loss.lambda_fcos);
    t.loss.lambda_obj = detail::num_or(j, "lambda_obj", t.loss.lambda_obj);
    t.loss.focal_gamma = detail::num_or(j, "focal_gamma", t.loss.focal_gamma);
    t.loss.focal_alpha = detail::num_or(j, "focal_alpha", t.loss.focal_alpha);
    t.loss.smooth_l1_beta = detail::num_or(j, "smooth_l1_beta", t.loss.smooth_l1_beta);
    if (j.contains("reg_loss")) {
        t.loss.reg = reg_loss_from_name(j.at("reg_loss").get<std::string>());
        t.reg_given = true;
    }
    t.proj_weight = detail::num_or(j, "proj_weight", t.proj_weight);
    t.checkpoint_every = detail::int_or(j, "checkpoint_every", t.checkpoint_every);
    return t;
}

struct TestSection {
    int topk = 2500;
    double nms_iou = 0.1;
    bool score_mul_centerness = false;
    double roi_enlarge = 1.2;
    double refine_nms_iou = 0.3;
    int refine_steps = 300;
    double refine_lr = 1e-4;
    double refine_wd = 1e-4;
    int refine_hidden = 32;

    void validate() const {
        require(topk >= 1, "test: topk >= 1");
        require(nms_iou > 0 && nms_iou < 1, "test: nms_iou in (0,1)");
        require(roi_enlarge > 0, "test: roi_enlarge > 0");
        require(refine_nms_iou > 0 && refine_nms_iou < 1, "test: refine_nms_iou in (0,1)");
        require(refine_steps >= 1, "test: refine_steps >= 1");
        require(refine_lr > 0 && refine_wd >= 0, "test: refine_lr > 0 and refine_wd >= 0");
        require(refine_hidden >= 1, "test: refine_hidden >= 1");
    }
};

inline json test_section_to_json(const TestSection& t) {
    return json{{"topk", t.topk},
                {"nms_iou", t.nms_iou},
                {"score_mul_centerness", t.score_mul_centerness},
                {"roi_enlarge", t.roi_enlarge},
                {"refine_nms_iou", t.refine_nms_iou},
                {"refine_steps", t.refine_steps},
                {"refine_lr", t.refine_lr},
                {"refine_wd", t.refine_wd},
                {"refine_hidden", t.refine_hidden}};
}

inline TestSection test_section_from_json(const json& j) {
    check_keys(j,
               {},
               {"topk", "nms_iou", "score_mul_centerness", "roi_enlarge", "refine_nms_iou",
                "refine_steps", "refine_lr", "refine_wd", "refine_hidden"},
               "test section");
    TestSection t;
    t.topk = detail::int_or(j, "topk", t.topk);
    t.nms_iou = detail::num_or(j, "nms_iou", t.nms_iou);
    t.score_mul_centerness = detail::bool_or(j, "score_mul_centerness", t.score_mul_centerness);
    t.roi_enlarge = detail::num_or(j, "roi_enlarge", t.roi_enlarge);
    t.refine_nms_iou = detail::num_or(j, "refine_nms_iou", t.refine_nms_iou);
    t.refine_steps = detail::int_or(j, "refine_steps", t.refine_steps);
    t.refine_lr = detail::num_or(j, "refine_lr", t.refine_lr);
    t.refine_wd = detail::num_or(j, "refine_wd", t.refine_wd);
    t.refine_hidden = detail::int_or(j, "refine_hidden", t.refine_hidden);
    return t;
}

struct EvalSection {
    bool csv = false;

    void validate() const {}
};

inline json eval_section_to_json(const EvalSection& e) { return json{{"csv", e.csv}}; }

inline EvalSection eval_section_from_json(const json& j) {
    check_keys(j, {}, {"csv"}, "eval section");
    EvalSection e;
    e.csv = detail::bool_or(j, "csv", e.csv);
    return e;
}

struct RunConfig {
    int version = kRunConfigVersion;
    SceneSection scene;
    SamplingSection sampling;
    AnchorSection anchors;
    NetConfig head;
    TrainSection train;
    TestSection test;
    EvalSection eval;

    void validate() const {
        require(version == kRunConfigVersion,
                "config: version " + std::to_string(version) + " not supported");
        scene.validate();
        sampling.validate();
        anchors.validate();
        head.validate();
        train.validate();
        test.validate();
        eval.validate();
        require(head.in_channels == sampling_strategy().channels(),
                "config: head.in_channels must match the sampling strategy's channels");
    }

    SamplingStrategy sampling_strategy() const {
        SamplingStrategy s;
        s.kind = sampling.kind;
        s.sh_dirs = sampling.sh_dirs;
        return s;
    }

    TrainOptions train_options(uint64_t seed) const {
        TrainOptions o;
        o.steps = train.steps;
        o.lr = train.lr;
        o.wd = train.wd;
        o.seed = seed;
        o.loss = train.loss;
        if (!train.reg_given)
            o.loss.reg = head.head == HeadKind::Anchor ? RegLoss::SmoothL1 : RegLoss::IoU;
        o.augment = train.augment;
        o.aug = train.aug;
        o.minibatch = train.minibatch;
        o.pos_fraction = train.pos_fraction;
        o.anchor_shortest = anchors.shortest;
        o.anchor_pos_iou = anchors.pos_iou;
        o.anchor_neg_iou = anchors.neg_iou;
        o.proj_weight = train.proj_weight;
        o.checkpoint_every = train.checkpoint_every;
        return o;
    }

    ProposeOptions propose_options() const {
        ProposeOptions o;
        o.topk = size_t(test.topk);
        o.nms_iou = test.nms_iou;
        o.score_mul_centerness = test.score_mul_centerness;
        o.anchor_shortest = anchors.shortest;
        return o;
    }
};

inline json run_config_to_json(const RunConfig& c) {
    return json{{"version", c.version},
                {"scene", scene_section_to_json(c.scene)},
                {"sampling", sampling_section_to_json(c.sampling)},
                {"anchors", anchor_section_to_json(c.anchors)},
                {"head", head_section_to_json(c.head)},
                {"train", train_section_to_json(c.train)},
                {"test", test_section_to_json(c.test)},
                {"eval", eval_section_to_json(c.eval)}};
}

inline RunConfig run_config_from_json(const json& j) {
    check_keys(j, {"version"},
               {"scene", "sampling", "anchors", "head", "train", "test", "eval"}, "config");
    RunConfig c;
    require(j.at("version").is_number_integer(), "config: version must be an integer");
    c.version = j.at("version").get<int>();
    if (j.contains("scene")) c.scene = scene_section_from_json(j.at("scene"));
    if (j.contains("sampling")) c.sampling = sampling_section_from_json(j.at("sampling"));
    if (j.contains("anchors")) c.anchors = anchor_section_from_json(j.at("anchors"));
    if (j.contains("head")) c.head = head_section_from_json(j.at("head"));
    if (j.contains("train")) c.train = train_section_from_json(j.at("train"));
    if (j.contains("test")) c.test = test_section_from_json(j.at("test"));
    if (j.contains("eval")) c.eval = eval_section_from_json(j.at("eval"));
    c.validate();
    return c;
}

}  // namespace voxrpn
