// Command-line front end over the library: scene synthesis, grid sampling,
// training, proposal generation, refinement, evaluation, box projection,
// density editing, and a built-in self test. One JSON config plus --seed pins
// every run; identical inputs give byte-identical artifacts.

#include <CLI11.hpp>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>
#include <voxrpn/config.hpp>
#include <voxrpn/metrics.hpp>
#include <voxrpn/scene.hpp>
#include <voxrpn/train.hpp>

namespace fs = std::filesystem;
using namespace voxrpn;

namespace {

RunConfig load_config(const std::string& path) {
    if (path.empty()) {
        RunConfig c;
        c.validate();
        return c;
    }
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    return run_config_from_json(json::parse(is));
}

std::string pad4(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

// scene_0000.json, grid_0001.nvg, ... numbered contiguously from zero
std::vector<fs::path> indexed_files(const fs::path& dir, const std::string& prefix,
                                    const std::string& ext) {
    if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (size_t i = 0;; ++i) {
        fs::path p = dir / (prefix + pad4(i) + ext);
        if (!fs::exists(p)) break;
        out.push_back(p);
    }
    if (out.empty())
        throw std::invalid_argument("no " + prefix + "NNNN" + ext + " files in " + dir.string());
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

json load_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open: " + path.string());
    return json::parse(is);
}

// index-sharded loop; any worker exception is rethrown on the caller
template <class F>
void parallel_for(size_t n, int jobs, F fn) {
    jobs = std::clamp(jobs, 1, int(n > 0 ? n : 1));
    if (jobs == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::mutex mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(mu);
                    if (!err) err = std::current_exception();
                    next.store(n);
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

uint64_t scene_seed(uint64_t run_seed, size_t index) {
    return Rng(run_seed).split(0x5ce'0000 + index).u64();
}

int cmd_synth(const RunConfig& cfg, uint64_t seed, const std::string& out) {
    fs::create_directories(out);
    size_t total = size_t(cfg.scene.count + cfg.scene.holdout);
    for (size_t i = 0; i < total; ++i) {
        SyntheticScene s = synth_scene(cfg.scene.synth, scene_seed(seed, i));
        s.cameras = corner_cameras(s.room);
        save_scene(s, (fs::path(out) / ("scene_" + pad4(i) + ".json")).string());
    }
    std::fprintf(stderr, "wrote %zu scenes to %s\n", total, out.c_str());
    return 0;
}

VoxelGrid sample_one(const RunConfig& cfg, const SyntheticScene& s) {
    SceneField field(s);
    SamplingStrategy strat = cfg.sampling_strategy();
    strat.cameras = s.cameras;
    return sample_grid(field, s.room, cfg.sampling.dims, strat);
}

int cmd_sample(const RunConfig& cfg, const std::string& in, const std::string& out, int jobs) {
    if (fs::is_directory(in)) {
        std::vector<fs::path> scenes = indexed_files(in, "scene_", ".json");
        fs::create_directories(out);
        parallel_for(scenes.size(), jobs, [&](size_t i) {
            SyntheticScene s = load_scene(scenes[i].string());
            save_nvg(sample_one(cfg, s), (fs::path(out) / ("grid_" + pad4(i) + ".nvg")).string());
        });
        std::fprintf(stderr, "sampled %zu grids to %s\n", scenes.size(), out.c_str());
    } else {
        save_nvg(sample_one(cfg, load_scene(in)), out);
    }
    return 0;
}

std::vector<TrainScene> load_pairs(const std::string& dir, size_t limit = 0) {
    std::vector<fs::path> scenes = indexed_files(dir, "scene_", ".json");
    std::vector<fs::path> grids = indexed_files(dir, "grid_", ".nvg");
    if (scenes.size() != grids.size())
        throw std::invalid_argument("data dir has " + std::to_string(scenes.size()) +
                                    " scenes but " + std::to_string(grids.size()) + " grids");
    if (limit > 0 && limit < scenes.size()) scenes.resize(limit);
    std::vector<TrainScene> out;
    for (size_t i = 0; i < scenes.size(); ++i) {
        SyntheticScene s = load_scene(scenes[i].string());
        out.push_back({load_nvg(grids[i].string()), s.gt_boxes(), s.cameras});
    }
    return out;
}

int cmd_train(const RunConfig& cfg, uint64_t seed, const std::string& data,
              const std::string& out, const std::string& head, const std::string& log_path) {
    NetConfig netcfg = cfg.head;
    if (!head.empty()) netcfg.head = head_kind_from(head);
    std::vector<TrainScene> scenes = load_pairs(data, size_t(cfg.scene.count));
    TrainOptions opt = cfg.train_options(seed);
    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw std::runtime_error("cannot open for write: " + log_path);
        opt.log = &log;
    }
    opt.ckpt_path = out;
    TrainResult res = train(netcfg, scenes, opt);
    std::fprintf(stderr, "trained %d steps on %zu scenes, loss %.4f -> %.4f, saved %s\n",
                 opt.steps, scenes.size(), res.history.empty() ? 0.0 : res.history.front().total,
                 res.history.empty() ? 0.0 : res.history.back().total, out.c_str());
    return 0;
}

int cmd_propose(const RunConfig& cfg, const std::string& ckpt, const std::string& grid,
                const std::string& out, int jobs) {
    NetT<float> net = load_checkpoint<float>(ckpt);
    ProposeOptions opt = cfg.propose_options();
    if (fs::is_directory(grid)) {
        std::vector<fs::path> grids = indexed_files(grid, "grid_", ".nvg");
        fs::create_directories(out);
        parallel_for(grids.size(), jobs, [&](size_t i) {
            ProposeResult r = propose(net, load_nvg(grids[i].string()), opt);
            write_text(fs::path(out) / ("props_" + pad4(i) + ".json"),
                       proposals_to_json(r).dump(2) + "\n");
        });
        std::fprintf(stderr, "proposed on %zu grids to %s\n", grids.size(), out.c_str());
    } else {
        ProposeResult r = propose(net, load_nvg(grid), opt);
        write_text(out, proposals_to_json(r).dump(2) + "\n");
    }
    return 0;
}

// trains the box-refinement perceptron on the data scenes' proposals, then
// applies it to the target grid; there is no separate refine checkpoint
int cmd_refine(const RunConfig& cfg, uint64_t seed, const std::string& ckpt,
               const std::string& data, const std::string& grid, const std::string& out) {
    NetT<float> net = load_checkpoint<float>(ckpt);
    ProposeOptions popt = cfg.propose_options();
    popt.nms_iou = cfg.test.refine_nms_iou;
    std::vector<TrainScene> scenes = load_pairs(data);
    std::vector<RefineSample> samples;
    for (const TrainScene& sc : scenes) {
        ForwardT<float> f = net.forward(grid_to_volume<float>(sc.grid));
        ProposeResult pr = propose_from_forward(f, net.cfg.head, sc.grid, popt);
        std::vector<RefineSample> s =
            make_refine_samples(f, sc.grid, pr.proposals, sc.boxes, cfg.test.roi_enlarge);
        samples.insert(samples.end(), s.begin(), s.end());
    }
    RefineNet rnet = RefineNet::make(cfg.head.fpn_channels * 27, cfg.test.refine_hidden, seed);
    std::vector<LossBreakdown> hist = train_refine(rnet, samples, cfg.test.refine_steps,
                                                   cfg.test.refine_lr, cfg.test.refine_wd,
                                                   cfg.train.loss);
    VoxelGrid g = load_nvg(grid);
    ForwardT<float> f = net.forward(grid_to_volume<float>(g));
    ProposeResult pr = propose_from_forward(f, net.cfg.head, g, popt);
    ProposeResult refined;
    refined.proposals = refine(pr.proposals, f, g, rnet, cfg.test.roi_enlarge);
    refined.timings_ms = pr.timings_ms;
    write_text(out, proposals_to_json(refined).dump(2) + "\n");
    std::fprintf(stderr, "refine: %zu samples, loss %.4f -> %.4f, kept %zu of %zu proposals\n",
                 samples.size(), hist.empty() ? 0.0 : hist.front().total,
                 hist.empty() ? 0.0 : hist.back().total, refined.proposals.size(),
                 pr.proposals.size());
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& proposals, const std::string& scenes,
             const std::string& out, const std::string& csv, int jobs) {
    std::vector<fs::path> pfiles, sfiles;
    if (fs::is_directory(proposals)) {
        pfiles = indexed_files(proposals, "props_", ".json");
        sfiles = indexed_files(scenes, "scene_", ".json");
    } else {
        pfiles = {proposals};
        sfiles = {scenes};
    }
    if (pfiles.size() != sfiles.size())
        throw std::invalid_argument("eval: " + std::to_string(pfiles.size()) +
                                    " proposal files vs " + std::to_string(sfiles.size()) +
                                    " scene files");
    std::vector<std::vector<Proposal>> ps(pfiles.size());
    std::vector<std::vector<Obb>> gts(sfiles.size());
    parallel_for(pfiles.size(), jobs, [&](size_t i) {
        ps[i] = proposals_from_json(load_json(pfiles[i]));
        gts[i] = load_scene(sfiles[i].string()).gt_boxes();
    });
    EvalReport rep = evaluate(ps, gts);
    write_text(out, eval_report_to_json(rep).dump(2) + "\n");
    std::string csv_path = csv;
    if (csv_path.empty() && cfg.eval.csv) csv_path = fs::path(out).replace_extension(".csv").string();
    if (!csv_path.empty()) write_text(csv_path, eval_report_csv(rep));
    std::fprintf(stderr, "recall@0.25 %.4f  recall@0.5 %.4f  ap@0.25 %.4f  ap@0.5 %.4f\n",
                 rep.recall25, rep.recall50, rep.ap25, rep.ap50);
    return 0;
}

int cmd_project(const std::string& scene_path, const std::string& boxes_path,
                const std::string& out) {
    SyntheticScene s = load_scene(scene_path);
    std::vector<Obb> boxes;
    if (boxes_path.empty())
        boxes = s.gt_boxes();
    else
        for (const Proposal& p : proposals_from_json(load_json(boxes_path)))
            boxes.push_back(p.box);
    if (s.cameras.empty()) throw std::invalid_argument("project: scene has no cameras");
    json cams = json::array();
    for (size_t ci = 0; ci < s.cameras.size(); ++ci) {
        json per_box = json::array();
        for (const Obb& b : boxes) {
            std::array<Vec2, 8> px = project_box(s.cameras[ci], b);
            json corners = json::array();
            for (const Vec2& p : px) corners.push_back({p.x, p.y});
            per_box.push_back(std::move(corners));
        }
        cams.push_back({{"camera", ci}, {"boxes", std::move(per_box)}});
    }
    write_text(out, json{{"cameras", std::move(cams)}}.dump(2) + "\n");
    return 0;
}

int cmd_edit(const std::string& grid, const std::string& box_json, const std::string& out) {
    Obb box = obb_from_json(json::parse(box_json));
    save_nvg(delete_region(load_nvg(grid), box), out);
    return 0;
}

// ---- selftest: gradient checks and a Monte Carlo iou probe ----

double mc_iou_probe(const Obb& a, const Obb& b, int n, Rng rng) {
    Aabb ha = obb_to_aabb(a), hb = obb_to_aabb(b);
    auto vol = [](const Obb& o) { return o.size.x * o.size.y * o.size.z; };
    Aabb lo{{std::min(ha.min.x, hb.min.x), std::min(ha.min.y, hb.min.y),
             std::min(ha.min.z, hb.min.z)},
            {std::max(ha.max.x, hb.max.x), std::max(ha.max.y, hb.max.y),
             std::max(ha.max.z, hb.max.z)}};
    Vec3 e = lo.extent();
    int hits_a = 0, hits_b = 0, hits_both = 0;
    auto inside = [](const Obb& o, Vec3 p) {
        Vec3 d = p - o.center;
        double c = std::cos(o.yaw), s = std::sin(o.yaw);
        double lx = d.x * c + d.y * s, ly = -d.x * s + d.y * c;
        return std::abs(lx) <= o.size.x / 2 && std::abs(ly) <= o.size.y / 2 &&
               std::abs(d.z) <= o.size.z / 2;
    };
    for (int i = 0; i < n; ++i) {
        Vec3 p{lo.min.x + rng.uniform() * e.x, lo.min.y + rng.uniform() * e.y,
               lo.min.z + rng.uniform() * e.z};
        bool ia = inside(a, p), ib = inside(b, p);
        hits_a += ia;
        hits_b += ib;
        hits_both += ia && ib;
    }
    double box_vol = e.x * e.y * e.z;
    double inter = box_vol * hits_both / n;
    double uni = vol(a) + vol(b) - inter;
    (void)hits_a;
    (void)hits_b;
    return uni > 0 ? inter / uni : 0.0;
}

int cmd_selftest(uint64_t seed) {
    bool ok = true;
    auto report = [&](const char* name, bool pass, double stat) {
        std::printf("selftest %-12s %s (%.3g)\n", name, pass ? "pass" : "FAIL", stat);
        ok = ok && pass;
    };

    {
        Rng rng(seed);
        double worst = 0;
        for (int i = 0; i < 20; ++i) {
            auto rbox = [&] {
                return Obb({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                           {rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)},
                           rng.uniform(-kPi / 2, kPi / 2));
            };
            Obb a = rbox(), b = rbox();
            double mc = mc_iou_probe(a, b, 200000, rng.split(uint64_t(i)));
            worst = std::max(worst, std::abs(mc - rotated_iou(a, b)));
        }
        report("iou-mc", worst < 0.02, worst);
    }

    for (HeadKind head : {HeadKind::Anchor, HeadKind::Fcos}) {
        SynthConfig sc;
        sc.room_size = {4, 4, 3};
        sc.max_objects = 2;
        sc.min_size = {0.8, 0.8, 0.8};
        sc.max_size = {2.0, 2.0, 1.5};
        SyntheticScene scene = synth_scene(sc, seed + 17);
        SceneField field(scene);
        SamplingStrategy strat;
        VoxelGrid grid = sample_grid(field, scene.room, {8, 8, 6}, strat);

        NetConfig ncfg;
        ncfg.stage_channels = {4, 6};
        ncfg.stage_strides = {1, 2};
        ncfg.fpn_stages = {0, 1};
        ncfg.fpn_channels = 4;
        ncfg.head_convs = 1;
        ncfg.head = head;
        NetT<double> net = NetT<double>::make(ncfg, seed + 1);
        // zero-init biases put empty voxels exactly on the relu kink, which
        // breaks central differences; nudge every weight to a generic point
        Rng jit(seed + 5);
        for (TensorT<double>& t : net.params)
            for (double& w : t.w) w += jit.uniform(-0.05, 0.05);

        TrainOptions opt;
        opt.minibatch = 32;
        opt.augment = false;
        opt.loss.reg = RegLoss::SmoothL1;  // C1 everywhere, so FD probes stay clean
        uint64_t mb_seed = 99;
        train_step(net, grid, scene.gt_boxes(), {}, opt, mb_seed, true);

        Rng prng(seed + 3);
        double worst = 0;
        for (int probe = 0; probe < 12; ++probe) {
            TensorT<double>& t = net.params[prng.uniform_int(net.params.size())];
            size_t idx = size_t(prng.uniform_int(t.w.size()));
            double keep = t.w[idx], h = 1e-6;
            t.w[idx] = keep + h;
            double up = train_step(net, grid, scene.gt_boxes(), {}, opt, mb_seed, false).total;
            t.w[idx] = keep - h;
            double dn = train_step(net, grid, scene.gt_boxes(), {}, opt, mb_seed, false).total;
            t.w[idx] = keep;
            double fd = (up - dn) / (2 * h);
            double rel = std::abs(fd - t.g[idx]) / std::max({1.0, std::abs(fd), std::abs(t.g[idx])});
            worst = std::max(worst, rel);
        }
        report(head == HeadKind::Anchor ? "grad-anchor" : "grad-fcos", worst < 1e-5, worst);
    }
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxel region proposals over radiance-field grids"};
    app.set_version_flag("--version",
                         "voxrpn formats: nvg NVG1, scene 1, checkpoint NCK1, config 1");
    app.require_subcommand(1);

    std::string config_path, out, in, data, ckpt, grid, head, log_path, box_json;
    std::string proposals_path, scenes_path, csv, boxes_path, scene_path;
    uint64_t seed = 1;
    int jobs = 1;

    auto add_common = [&](CLI::App* sub, bool with_seed) {
        sub->add_option("--config", config_path, "run config json");
        if (with_seed) sub->add_option("--seed", seed, "root seed (default 1)");
        sub->add_option("--jobs", jobs, "parallelism across scenes")->check(CLI::PositiveNumber);
    };

    CLI::App* synth = app.add_subcommand("synth", "generate synthetic scene jsons");
    add_common(synth, true);
    synth->add_option("--out", out, "output directory")->required();

    CLI::App* sample = app.add_subcommand("sample", "voxelize scenes into nvg grids");
    add_common(sample, false);
    sample->add_option("--in", in, "scene json or directory of scene_NNNN.json")->required();
    sample->add_option("--out", out, "nvg path or directory")->required();

    CLI::App* train_c = app.add_subcommand("train", "train a proposal net");
    add_common(train_c, true);
    train_c->add_option("--data", data, "directory with scene_NNNN.json + grid_NNNN.nvg")
        ->required();
    train_c->add_option("--out", ckpt, "checkpoint output path")->required();
    train_c->add_option("--head", head, "override head kind: anchor or fcos");
    train_c->add_option("--log", log_path, "jsonl loss log path");

    CLI::App* propose_c = app.add_subcommand("propose", "emit ranked box proposals");
    add_common(propose_c, false);
    propose_c->add_option("--ckpt", ckpt, "checkpoint path")->required();
    propose_c->add_option("--grid", grid, "nvg path or directory")->required();
    propose_c->add_option("--out", out, "proposals json path or directory")->required();

    CLI::App* refine_c = app.add_subcommand("refine", "train the refinement head and apply it");
    add_common(refine_c, true);
    refine_c->add_option("--ckpt", ckpt, "checkpoint path")->required();
    refine_c->add_option("--data", data, "directory with scene/grid pairs to fit on")->required();
    refine_c->add_option("--grid", grid, "target nvg grid")->required();
    refine_c->add_option("--out", out, "refined proposals json")->required();

    CLI::App* eval_c = app.add_subcommand("eval", "score proposals against ground truth");
    add_common(eval_c, false);
    eval_c->add_option("--proposals", proposals_path, "props json or directory")->required();
    eval_c->add_option("--scenes", scenes_path, "scene json or directory")->required();
    eval_c->add_option("--out", out, "report json path")->required();
    eval_c->add_option("--csv", csv, "also write a per-scene csv here");

    CLI::App* project_c = app.add_subcommand("project", "project boxes through scene cameras");
    project_c->add_option("--scene", scene_path, "scene json (cameras + default boxes)")
        ->required();
    project_c->add_option("--boxes", boxes_path, "proposals json instead of the scene's boxes");
    project_c->add_option("--out", out, "pixel corners json")->required();

    CLI::App* edit_c = app.add_subcommand("edit", "zero the density inside a box");
    edit_c->add_option("--grid", grid, "input nvg")->required();
    edit_c->add_option("--box", box_json, "obb json, e.g. {\"center\":[..],\"size\":[..],\"yaw\":0}")
        ->required();
    edit_c->add_option("--out", out, "output nvg")->required();

    CLI::App* selftest = app.add_subcommand("selftest", "gradient + iou spot checks");
    selftest->add_option("--seed", seed, "probe seed");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return cmd_synth(load_config(config_path), seed, out);
        if (sample->parsed()) return cmd_sample(load_config(config_path), in, out, jobs);
        if (train_c->parsed())
            return cmd_train(load_config(config_path), seed, data, ckpt, head, log_path);
        if (propose_c->parsed())
            return cmd_propose(load_config(config_path), ckpt, grid, out, jobs);
        if (refine_c->parsed())
            return cmd_refine(load_config(config_path), seed, ckpt, data, grid, out);
        if (eval_c->parsed())
            return cmd_eval(load_config(config_path), proposals_path, scenes_path, out, csv, jobs);
        if (project_c->parsed()) return cmd_project(scene_path, boxes_path, out);
        if (edit_c->parsed()) return cmd_edit(grid, box_json, out);
        if (selftest->parsed()) return cmd_selftest(seed);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n\n%s", e.what(), app.help().c_str());
        return 1;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
