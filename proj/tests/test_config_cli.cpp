#include <sys/wait.h>

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <voxrpn/config.hpp>
#include <voxrpn/metrics.hpp>
#include <voxrpn/scene.hpp>

using namespace voxrpn;
namespace fs = std::filesystem;

TEST_CASE("config defaults pin the protocol constants", "[config]") {
    RunConfig c;
    CHECK(c.version == 1);
    CHECK(c.test.topk == 2500);
    CHECK(c.test.nms_iou == 0.1);
    CHECK(c.test.refine_nms_iou == 0.3);
    CHECK(c.test.refine_lr == 1e-4);
    CHECK(c.test.refine_wd == 1e-4);
    CHECK(c.test.roi_enlarge == 1.2);
    CHECK(c.train.minibatch == 256);
    CHECK(c.train.pos_fraction == 0.5);
    CHECK(c.train.loss.lambda_anchor == 5.0);
    CHECK(c.train.loss.lambda_fcos == 1.0);
    CHECK(c.train.loss.lambda_obj == 5.0);
    CHECK(c.train.loss.focal_gamma == 2.0);
    CHECK(c.train.loss.focal_alpha == 0.25);
    CHECK(c.anchors.pos_iou == 0.35);
    CHECK(c.anchors.neg_iou == 0.2);
    CHECK_FALSE(c.test.score_mul_centerness);
    CHECK(c.sampling.kind == SamplingStrategy::Kind::DensityOnly);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config json round trip and strictness", "[config]") {
    SECTION("default round trip is exact") {
        RunConfig c;
        json j = run_config_to_json(c);
        RunConfig back = run_config_from_json(j);
        CHECK(run_config_to_json(back) == j);
    }
    SECTION("overrides land where they should") {
        json j = {{"version", 1},
                  {"scene", {{"count", 3}, {"max_objects", 2}}},
                  {"sampling", {{"dims", {24, 24, 24}}}},
                  {"anchors", {{"shortest", {4.0, 8.0}}, {"pos_iou", 0.4}}},
                  {"head", {{"kind", "anchor"}, {"stage_channels", {4, 8}},
                            {"stage_strides", {2, 2}}, {"fpn_stages", {0, 1}}}},
                  {"train", {{"steps", 77}, {"lr", 0.002}, {"minibatch", 64}}},
                  {"test", {{"topk", 100}, {"nms_iou", 0.2}}},
                  {"eval", {{"csv", true}}}};
        RunConfig c = run_config_from_json(j);
        CHECK(c.scene.count == 3);
        CHECK(c.sampling.dims[0] == 24);
        CHECK(c.anchors.shortest == std::vector<double>{4.0, 8.0});
        CHECK(c.head.head == HeadKind::Anchor);
        TrainOptions to = c.train_options(9);
        CHECK(to.steps == 77);
        CHECK(to.lr == 0.002);
        CHECK(to.minibatch == 64);
        CHECK(to.seed == 9);
        CHECK(to.anchor_pos_iou == 0.4);
        CHECK(to.anchor_shortest == std::vector<double>{4.0, 8.0});
        ProposeOptions po = c.propose_options();
        CHECK(po.topk == 100);
        CHECK(po.nms_iou == 0.2);
        CHECK(po.anchor_shortest == std::vector<double>{4.0, 8.0});
        // defaults not overridden stay put
        CHECK(c.train.loss.lambda_anchor == 5.0);
    }
    SECTION("unknown keys are rejected everywhere") {
        CHECK_THROWS_AS(run_config_from_json({{"version", 1}, {"bogus", 1}}),
                        std::invalid_argument);
        CHECK_THROWS_AS(run_config_from_json({{"version", 1}, {"train", {{"bogus", 1}}}}),
                        std::invalid_argument);
        CHECK_THROWS_AS(run_config_from_json({{"version", 1}, {"test", {{"top_k", 10}}}}),
                        std::invalid_argument);
    }
    SECTION("version is pinned") {
        CHECK_THROWS_AS(run_config_from_json(json::object()), std::invalid_argument);
        CHECK_THROWS_AS(run_config_from_json({{"version", 2}}), std::invalid_argument);
    }
    SECTION("regression loss defaults follow the head") {
        RunConfig fc = run_config_from_json({{"version", 1}, {"head", {{"kind", "fcos"}}}});
        CHECK(fc.train_options(1).loss.reg == RegLoss::IoU);
        RunConfig an = run_config_from_json({{"version", 1}, {"head", {{"kind", "anchor"}}}});
        CHECK(an.train_options(1).loss.reg == RegLoss::SmoothL1);
        RunConfig ex = run_config_from_json(
            {{"version", 1}, {"head", {{"kind", "anchor"}}}, {"train", {{"reg_loss", "diou"}}}});
        CHECK(ex.train_options(1).loss.reg == RegLoss::DIoU);
    }
    SECTION("cross-field checks") {
        CHECK_THROWS_AS(run_config_from_json({{"version", 1}, {"sampling", {{"kind", "sh3"}}}}),
                        std::invalid_argument);  // 49 channels vs in_channels 1
        CHECK_NOTHROW(run_config_from_json(
            {{"version", 1}, {"sampling", {{"kind", "sh3"}}}, {"head", {{"in_channels", 49}}}}));
        CHECK_THROWS_AS(run_config_from_json({{"version", 1}, {"sampling", {{"kind", "what"}}}}),
                        std::invalid_argument);
    }
    SECTION("sampling kind names round trip") {
        for (auto k : {SamplingStrategy::Kind::DensityOnly, SamplingStrategy::Kind::Fixed18,
                       SamplingStrategy::Kind::CameraAvg, SamplingStrategy::Kind::FrustumAvg,
                       SamplingStrategy::Kind::Sh3})
            CHECK(sampling_kind_from_name(sampling_kind_name(k)) == k);
    }
}

// ---- driving the actual binary ----

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct CliFixture {
    fs::path dir;

    CliFixture() {
        dir = fs::temp_directory_path() /
              ("voxrpn_cli_" + std::to_string(uint64_t(::getpid())) + "_" +
               std::to_string(uint64_t(std::chrono::steady_clock::now().time_since_epoch().count())));
        fs::create_directories(dir);
    }
    ~CliFixture() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }

    CliResult run(const std::string& args) const {
        fs::path so = dir / ".stdout", se = dir / ".stderr";
        std::string cmd = std::string(VOXRPN_CLI_PATH) + " " + args + " > " + so.string() +
                          " 2> " + se.string();
        int rc = std::system(cmd.c_str());
        CliResult r;
        r.code = rc >= 0 && WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
        r.out = slurp(so);
        r.err = slurp(se);
        return r;
    }

    fs::path write_config() const {
        json cfg = {
            {"version", 1},
            {"scene",
             {{"room_size", {4.8, 4.8, 4.8}},
              {"max_objects", 2},
              {"max_size", {1.8, 1.8, 1.5}},
              {"count", 3},
              {"holdout", 1}}},
            {"sampling", {{"dims", {12, 12, 12}}}},
            {"head",
             {{"kind", "fcos"},
              {"stage_channels", {4, 6}},
              {"stage_strides", {2, 2}},
              {"fpn_stages", {0, 1}},
              {"fpn_channels", 4},
              {"head_convs", 1}}},
            {"train", {{"steps", 12}, {"lr", 1e-3}}},
            {"test", {{"topk", 50}, {"refine_steps", 40}, {"refine_hidden", 8}}}};
        fs::path p = dir / "config.json";
        std::ofstream(p) << cfg.dump(2);
        return p;
    }
};

}  // namespace

TEST_CASE("cli surface", "[cli]") {
    CliFixture fx;
    SECTION("version string names the formats") {
        CliResult r = fx.run("--version");
        CHECK(r.code == 0);
        CHECK(r.out.find("NVG1") != std::string::npos);
        CHECK(r.out.find("NCK1") != std::string::npos);
    }
    SECTION("no subcommand is a usage error") {
        CliResult r = fx.run("");
        CHECK(r.code == 1);
        CHECK(r.err.find("Usage") != std::string::npos);
    }
    SECTION("missing required flag prints usage on stderr") {
        CliResult r = fx.run("synth");
        CHECK(r.code == 1);
        CHECK(r.err.find("--out") != std::string::npos);
    }
    SECTION("invalid config json is a validation error") {
        fs::path bad = fx.dir / "bad.json";
        std::ofstream(bad) << "{\"version\": 1, \"nonsense\": true}";
        CliResult r = fx.run("synth --config " + bad.string() + " --out " +
                             (fx.dir / "scenes").string());
        CHECK(r.code == 1);
        CHECK(r.err.find("nonsense") != std::string::npos);
    }
    SECTION("unreadable checkpoint is a runtime error") {
        CliResult r = fx.run("propose --ckpt " + (fx.dir / "missing.bin").string() + " --grid x --out y");
        CHECK(r.code == 2);
    }
}

TEST_CASE("cli pipeline end to end", "[cli]") {
    CliFixture fx;
    fs::path cfg = fx.write_config();
    std::string c = " --config " + cfg.string();
    fs::path scenes = fx.dir / "scenes", grids = fx.dir / "grids", props = fx.dir / "props";

    // synth: 3 train + 1 holdout scenes, deterministic bytes
    REQUIRE(fx.run("synth" + c + " --seed 5 --out " + scenes.string()).code == 0);
    REQUIRE(fs::exists(scenes / "scene_0003.json"));
    CHECK_FALSE(fs::exists(scenes / "scene_0004.json"));
    fs::path scenes2 = fx.dir / "scenes2";
    REQUIRE(fx.run("synth" + c + " --seed 5 --out " + scenes2.string()).code == 0);
    for (int i = 0; i < 4; ++i) {
        std::string n = "scene_000" + std::to_string(i) + ".json";
        CHECK(slurp(scenes / n) == slurp(scenes2 / n));
    }
    SyntheticScene s0 = load_scene((scenes / "scene_0000.json").string());
    CHECK(s0.cameras.size() == 4);

    // sample: whole directory, then one file
    REQUIRE(fx.run("sample" + c + " --in " + scenes.string() + " --out " + grids.string()).code ==
            0);
    REQUIRE(fs::exists(grids / "grid_0003.nvg"));
    VoxelGrid g0 = load_nvg((grids / "grid_0000.nvg").string());
    CHECK(g0.W() == 12);
    CHECK(g0.C() == 1);
    fs::path one = fx.dir / "one.nvg";
    REQUIRE(fx.run("sample" + c + " --in " + (scenes / "scene_0000.json").string() + " --out " +
                   one.string())
                .code == 0);
    CHECK(slurp(one) == slurp(grids / "grid_0000.nvg"));

    // train on the first 3 pairs (config count), deterministic checkpoint
    fs::path ckpt = fx.dir / "net.bin";
    CliResult tr = fx.run("train" + c + " --seed 5 --data " + grids.string() + " --out " +
                          ckpt.string());
    // needs scene jsons in the same dir; copy them over and retry
    CHECK(tr.code == 1);
    for (int i = 0; i < 4; ++i) {
        std::string n = "scene_000" + std::to_string(i) + ".json";
        fs::copy_file(scenes / n, grids / n);
    }
    REQUIRE(fx.run("train" + c + " --seed 5 --data " + grids.string() + " --out " +
                   ckpt.string())
                .code == 0);
    REQUIRE(fs::exists(ckpt));
    fs::path ckpt2 = fx.dir / "net2.bin";
    REQUIRE(fx.run("train" + c + " --seed 5 --data " + grids.string() + " --out " +
                   ckpt2.string())
                .code == 0);
    CHECK(slurp(ckpt) == slurp(ckpt2));
    NetT<float> net = load_checkpoint<float>(ckpt.string());
    CHECK(net.cfg.head == HeadKind::Fcos);

    // --head overrides the config's head kind
    fs::path ckpt_a = fx.dir / "net_anchor.bin";
    REQUIRE(fx.run("train" + c + " --seed 5 --data " + grids.string() + " --head anchor --out " +
                   ckpt_a.string())
                .code == 0);
    CHECK(load_checkpoint<float>(ckpt_a.string()).cfg.head == HeadKind::Anchor);

    // propose over the directory; stable modulo timings
    REQUIRE(fx.run("propose" + c + " --ckpt " + ckpt.string() + " --grid " + grids.string() +
                   " --out " + props.string())
                .code == 0);
    REQUIRE(fs::exists(props / "props_0003.json"));
    json pj = json::parse(slurp(props / "props_0000.json"));
    std::vector<Proposal> ps = proposals_from_json(pj);
    CHECK(!ps.empty());
    CHECK(ps.size() <= 50);
    for (size_t i = 1; i < ps.size(); ++i) CHECK(ps[i - 1].score >= ps[i].score);
    fs::path props2 = fx.dir / "props2";
    REQUIRE(fx.run("propose" + c + " --ckpt " + ckpt.string() + " --grid " + grids.string() +
                   " --out " + props2.string())
                .code == 0);
    json pa = json::parse(slurp(props / "props_0001.json"));
    json pb = json::parse(slurp(props2 / "props_0001.json"));
    pa.erase("timings_ms");
    pb.erase("timings_ms");
    CHECK(pa == pb);

    // eval writes a report plus optional csv
    fs::path report = fx.dir / "report.json";
    REQUIRE(fx.run("eval" + c + " --proposals " + props.string() + " --scenes " + scenes.string() +
                   " --out " + report.string() + " --csv " + (fx.dir / "report.csv").string())
                .code == 0);
    EvalReport rep = eval_report_from_json(json::parse(slurp(report)));
    CHECK(rep.scenes.size() == 4);
    CHECK(rep.total_gts >= 4);
    for (double v : {rep.recall25, rep.recall50, rep.ap25, rep.ap50}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    std::string csv = slurp(fx.dir / "report.csv");
    CHECK(csv.rfind("scene,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);

    // refine: fit on the pairs, apply to one grid
    fs::path refined = fx.dir / "refined.json";
    REQUIRE(fx.run("refine" + c + " --seed 5 --ckpt " + ckpt.string() + " --data " +
                   grids.string() + " --grid " + (grids / "grid_0003.nvg").string() + " --out " +
                   refined.string())
                .code == 0);
    std::vector<Proposal> rps = proposals_from_json(json::parse(slurp(refined)));
    for (const Proposal& p : rps) {
        CHECK(p.score > 0.5);
        CHECK(p.box.size.x > 0);
    }

    // project: gt boxes through the scene cameras
    fs::path corners = fx.dir / "corners.json";
    REQUIRE(fx.run("project --scene " + (scenes / "scene_0000.json").string() + " --out " +
                   corners.string())
                .code == 0);
    json cj = json::parse(slurp(corners));
    REQUIRE(cj.at("cameras").size() == 4);
    CHECK(cj["cameras"][0].at("boxes").size() == s0.objects.size());
    CHECK(cj["cameras"][0]["boxes"][0].size() == 8);

    // edit zeroes the densities inside a box and keeps the format
    json box = obb_to_json(s0.objects[0].box);
    fs::path edited = fx.dir / "edited.nvg";
    REQUIRE(fx.run("edit --grid " + (grids / "grid_0000.nvg").string() + " --box '" + box.dump() +
                   "' --out " + edited.string())
                .code == 0);
    VoxelGrid ge = load_nvg(edited.string());
    double before = 0, after = 0;
    for (int k = 0; k < g0.H(); ++k)
        for (int j = 0; j < g0.L(); ++j)
            for (int i = 0; i < g0.W(); ++i)
                if (obb_contains(s0.objects[0].box, g0.voxel_center(i, j, k))) {
                    before += g0.at(0, i, j, k);
                    after += ge.at(0, i, j, k);
                }
    CHECK(before > 0.0);
    CHECK(after == 0.0);
    std::string raw = slurp(edited);
    CHECK(raw.rfind("NVG1", 0) == 0);
}

TEST_CASE("cli selftest", "[cli]") {
    CliFixture fx;
    CliResult r = fx.run("selftest --seed 3");
    CHECK(r.code == 0);
    CHECK(r.out.find("iou-mc") != std::string::npos);
    CHECK(r.out.find("grad-anchor") != std::string::npos);
    CHECK(r.out.find("grad-fcos") != std::string::npos);
    CHECK(r.out.find("FAIL") == std::string::npos);
}
