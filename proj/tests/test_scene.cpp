#include <catch2/catch_amalgamated.hpp>
#include <cstdio>

#include "oracles.hpp"
#include "voxrpn/scene.hpp"

using namespace voxrpn;

TEST_CASE("synth scene determinism and constraints", "[scene]") {
    SynthConfig cfg;
    SECTION("same seed reproduces the scene") {
        CHECK(scene_to_json(synth_scene(cfg, 42)) == scene_to_json(synth_scene(cfg, 42)));
        CHECK(scene_to_json(synth_scene(cfg, 42)) != scene_to_json(synth_scene(cfg, 43)));
    }
    SECTION("minimal config gives one axis-aligned box") {
        cfg.min_objects = cfg.max_objects = 1;
        cfg.yaw_range = 0;
        SyntheticScene s = synth_scene(cfg, 7);
        REQUIRE(s.objects.size() == 1);
        CHECK(s.objects[0].box.yaw == 0.0);
    }
    SECTION("separation, containment and density level hold over many scenes") {
        int total = 0;
        for (uint64_t seed = 0; seed < 1000; ++seed) {
            SyntheticScene s = synth_scene(cfg, seed);
            total += static_cast<int>(s.objects.size());
            for (size_t a = 0; a < s.objects.size(); ++a) {
                const SceneObject& oa = s.objects[a];
                CHECK(oa.sigma > s.ambient_sigma);
                Aabb hull = obb_to_aabb(oa.box);
                CHECK(s.room.contains(hull.min));
                CHECK(s.room.contains(hull.max));
                for (size_t b = a + 1; b < s.objects.size(); ++b)
                    CHECK(rotated_iou(oa.box, s.objects[b].box) < 0.05);
            }
        }
        CHECK(total > 1000);
    }
    SECTION("impossible placement reports failure") {
        cfg.room_size = {2, 2, 2};
        cfg.min_size = cfg.max_size = {3, 3, 3};
        cfg.max_place_attempts = 50;
        CHECK_THROWS_AS(synth_scene(cfg, 1), std::runtime_error);
    }
}

TEST_CASE("camera placement", "[scene]") {
    SynthConfig cfg;
    cfg.min_objects = cfg.max_objects = 3;
    SyntheticScene s = synth_scene(cfg, 11);
    SECTION("counts and containment") {
        auto cams = place_cameras(s, 10, 4, 99);
        CHECK(cams.size() == 10 + 3 * 4);
        for (const Camera& c : cams) CHECK(s.room.contains(c.position));
        auto again = place_cameras(s, 10, 4, 99);
        for (size_t i = 0; i < cams.size(); ++i)
            CHECK((cams[i].position - again[i].position).norm() == 0.0);
    }
    SECTION("close-up axes pass through object centers") {
        auto cams = place_cameras(s, 1, 2, 5);
        for (size_t o = 0; o < s.objects.size(); ++o)
            for (int i = 0; i < 2; ++i) {
                const Camera& c = cams[1 + o * 2 + i];
                Vec3 fwd = c.rotation.row(2);
                Vec3 to_center = s.objects[o].box.center - c.position;
                CHECK(fwd.cross(to_center).norm() < 1e-9 * to_center.norm());
            }
    }
    SECTION("corner mode puts four cameras at the top corners") {
        auto cams = corner_cameras(s.room);
        REQUIRE(cams.size() == 4);
        for (const Camera& c : cams) {
            CHECK(c.position.z == s.room.max.z);
            CHECK((c.position.x == s.room.min.x || c.position.x == s.room.max.x));
            CHECK((c.position.y == s.room.min.y || c.position.y == s.room.max.y));
            Vec3 fwd = c.rotation.row(2);
            Vec3 to_center = s.room.center() - c.position;
            CHECK(fwd.cross(to_center).norm() < 1e-9 * to_center.norm());
        }
    }
    SECTION("at least one general view required") {
        CHECK_THROWS_AS(place_cameras(s, 0, 2, 5), std::invalid_argument);
    }
}

namespace {

VoxelGrid random_grid(int W, int L, int H, int C, uint64_t seed) {
    VoxelGrid g(W, L, H, C, 0.25, {-1, -1, 0});
    Rng rng(seed);
    for (size_t v = 0; v < g.voxel_count(); ++v) g.data()[v] = static_cast<float>(rng.uniform());
    for (size_t v = g.voxel_count(); v < g.value_count(); ++v)
        g.data()[v] = static_cast<float>(rng.uniform(-2, 2));
    return g;
}

std::vector<float> sorted_channel(const VoxelGrid& g, int c) {
    auto begin = g.data().begin() + static_cast<long>(c * g.voxel_count());
    std::vector<float> v(begin, begin + static_cast<long>(g.voxel_count()));
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

TEST_CASE("augment flips and quarter turns", "[scene]") {
    VoxelGrid g = random_grid(6, 6, 4, 2, 101);
    std::vector<Obb> boxes = {Obb({-0.3, -0.6, 0.4}, {0.5, 0.3, 0.4}, 0.4)};
    SECTION("all probabilities zero is the identity") {
        AugmentSpec none{0, 0, 0, 0, kPi / 18};
        auto [g2, b2] = augment(g, boxes, none, 5);
        CHECK(g2 == g);
        CHECK(oracle::box_discrepancy(b2[0], boxes[0]) == 0.0);
    }
    SECTION("flip x is an involution and conserves values") {
        AugmentSpec fx{1, 0, 0, 0, 0};
        auto [g1, b1] = augment(g, boxes, fx, 1);
        auto [g2, b2] = augment(g1, b1, fx, 2);
        CHECK(g2 == g);
        CHECK(oracle::box_discrepancy(b2[0], boxes[0]) < 1e-12);
        for (int c = 0; c < g.C(); ++c) CHECK(sorted_channel(g1, c) == sorted_channel(g, c));
        CHECK(g1 != g);
    }
    SECTION("flip y involution") {
        AugmentSpec fy{0, 1, 0, 0, 0};
        auto [g1, b1] = augment(g, boxes, fy, 1);
        auto [g2, b2] = augment(g1, b1, fy, 2);
        CHECK(g2 == g);
        CHECK(oracle::box_discrepancy(b2[0], boxes[0]) < 1e-12);
    }
    SECTION("quarter turn moves a delta voxel to the pinned index") {
        VoxelGrid d(5, 5, 4, 1, 1.0, {0, 0, 0});
        d.at(0, 1, 2, 3) = 1.0f;
        VoxelGrid r = rot90_grid(d);
        CHECK(r.at(0, 2, 3, 3) == 1.0f);  // (i,j,k) -> (j, n-1-i, k)
        float total = 0;
        for (float v : r.data()) total += v;
        CHECK(total == 1.0f);
    }
    SECTION("four quarter turns restore the grid bit-exactly") {
        AugmentSpec rot{0, 0, 1, 0, 0};
        VoxelGrid cur = g;
        std::vector<Obb> bcur = boxes;
        for (int t = 0; t < 4; ++t) {
            auto [gn, bn] = augment(cur, bcur, rot, 40 + t);
            cur = std::move(gn);
            bcur = std::move(bn);
            for (int c = 0; c < g.C(); ++c) CHECK(sorted_channel(cur, c) == sorted_channel(g, c));
        }
        CHECK(cur == g);
        CHECK(oracle::box_discrepancy(bcur[0], boxes[0]) < 1e-12);
    }
    SECTION("quarter turn box map matches the content map") {
        // grid on [-1,-1]..(spacing 0.25, 6x6): xy center at -1 + 0.25*2.5
        VoxelGrid d(6, 6, 4, 1, 0.25, {-1, -1, 0});
        Vec2 c{-1 + 0.25 * 2.5, -1 + 0.25 * 2.5};
        Obb box({c.x + 0.3, c.y + 0.1, 0.5}, {0.2, 0.1, 0.3}, 0.2);
        AugmentSpec rot{0, 0, 1, 0, 0};
        auto [g2, b2] = augment(d, {box}, rot, 3);
        CHECK(b2[0].center.x == Catch::Approx(c.x + 0.1).margin(1e-12));
        CHECK(b2[0].center.y == Catch::Approx(c.y - 0.3).margin(1e-12));
        CHECK(std::abs(wrap_into(b2[0].yaw - (0.2 - kPi / 2), kPi)) < 1e-12);
    }
    SECTION("quarter turn demands a square footprint") {
        VoxelGrid bad(4, 6, 4, 1, 1.0, {0, 0, 0});
        CHECK_THROWS_AS(rot90_grid(bad), std::invalid_argument);
    }
}

TEST_CASE("augment jitter", "[scene]") {
    // smooth bump that decays to ~0 before the grid corners
    int n = 32;
    VoxelGrid g(n, n, 8, 1, 1.0, {0, 0, 0});
    double ci = (n - 1) * 0.5, sigma = n / 6.0;
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                double d2 = (i - ci) * (i - ci) + (j - ci) * (j - ci);
                g.at(0, i, j, k) =
                    static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)) * (0.5 + 0.05 * k));
            }
    double alpha = kPi / 18;
    VoxelGrid fwd = rotate_z_resample(g, alpha);
    VoxelGrid back = rotate_z_resample(fwd, -alpha);
    for (size_t v = 0; v < g.value_count(); ++v)
        CHECK(std::abs(back.data()[v] - g.data()[v]) < 0.05);

    SECTION("boxes follow the jitter rotation") {
        AugmentSpec jit{0, 0, 0, 1, kPi / 18};
        Obb box({ci + 4.0, ci, 2.0}, {2, 1, 1}, 0.1);
        auto [g2, b2] = augment(g, {box}, jit, 77);
        double a = Rng(77).split(0xa06).split(0).uniform();  // can't reuse internals; check geometry instead
        (void)a;
        // rotation about the grid center preserves the center distance
        double before = std::hypot(box.center.x - ci, box.center.y - ci);
        double after = std::hypot(b2[0].center.x - ci, b2[0].center.y - ci);
        CHECK(after == Catch::Approx(before).margin(1e-9));
        CHECK(b2[0].size == box.size);
        double dyaw = wrap_into(b2[0].yaw - box.yaw, kPi);
        CHECK(std::abs(dyaw) <= kPi / 18 + 1e-12);
        CHECK(std::abs(dyaw) > 0);
    }
}

TEST_CASE("delete region", "[scene]") {
    SECTION("whole-grid box zeroes everything including radiance") {
        VoxelGrid g = random_grid(6, 6, 4, 4, 5);
        VoxelGrid z = delete_region(g, Obb(g.bounds().center(), g.bounds().extent() * 2.0, 0.0));
        for (float v : z.data()) CHECK(v == 0.0f);
    }
    SECTION("outside box leaves the grid untouched") {
        VoxelGrid g = random_grid(6, 6, 4, 1, 6);
        CHECK(delete_region(g, Obb({100, 100, 100}, {1, 1, 1}, 0.3)) == g);
    }
    SECTION("zeroed count tracks the analytic volume") {
        VoxelGrid g(40, 40, 40, 1, 0.1, {0.05, 0.05, 0.05});
        for (float& v : g.data()) v = 0.5f;
        Obb box({2.0, 2.1, 1.9}, {1.6, 1.1, 0.9}, 0.6);
        VoxelGrid z = delete_region(g, box);
        int count = 0;
        for (float v : z.data()) count += v == 0.0f;
        double h = g.spacing();
        double analytic = box.volume() / (h * h * h);
        const Vec3& s = box.size;
        double shell = 2 * (s.x * s.y + s.x * s.z + s.y * s.z) / (h * h);
        CHECK(std::abs(count - analytic) < shell * 1.2 + 32);
    }
    SECTION("deleting a GT box removes its alpha mass from a sampled scene") {
        SynthConfig cfg;
        cfg.min_objects = cfg.max_objects = 1;
        SyntheticScene s = synth_scene(cfg, 21);
        SceneField f(s);
        VoxelGrid g = sample_grid(f, s.room, grid_resolution(s.room, 32), {});
        VoxelGrid z = delete_region(g, s.objects[0].box);
        double before = 0, after = 0;
        for (float v : g.data()) before += v;
        for (float v : z.data()) after += v;
        double alpha_in = density_to_alpha(s.objects[0].sigma);
        double h = g.spacing();
        double mass = alpha_in * s.objects[0].box.volume() / (h * h * h);
        const Vec3& bs = s.objects[0].box.size;
        double shell = 2 * (bs.x * bs.y + bs.x * bs.z + bs.y * bs.z) / (h * h);
        CHECK(std::abs((before - after) - mass) < 2 * shell * alpha_in + 1.0);
        CHECK(before - after > 0);
    }
}

TEST_CASE("scene json round trip", "[scene]") {
    SynthConfig cfg;
    cfg.ambient_sigma = 2.0;
    cfg.sigma_min = 30;
    cfg.hollow = true;
    SyntheticScene s = synth_scene(cfg, 123);
    s.cameras = place_cameras(s, 3, 1, 9);
    std::string path = "test_scene.json";
    save_scene(s, path);
    SyntheticScene r = load_scene(path);
    CHECK(scene_to_json(r) == scene_to_json(s));
    CHECK(r.seed == s.seed);
    CHECK(r.objects.size() == s.objects.size());
    CHECK(r.cameras.size() == s.cameras.size());
    CHECK(r.objects[0].shell == s.objects[0].shell);

    SECTION("strictness") {
        json j = scene_to_json(s);
        j["extra"] = 1;
        CHECK_THROWS_AS(scene_from_json(j), std::invalid_argument);
        j.erase("extra");
        j["version"] = "2";
        CHECK_THROWS_AS(scene_from_json(j), std::invalid_argument);
        j["version"] = "1";
        j["objects"][0]["sigma"] = 1.0;  // below ambient
        CHECK_THROWS_AS(scene_from_json(j), std::invalid_argument);
        j["objects"][0]["sigma"] = 50.0;
        j["objects"][0]["box"]["center"] = {100.0, 0.0, 0.0};
        CHECK_THROWS_AS(scene_from_json(j), std::invalid_argument);
    }
    SECTION("parse errors carry a byte offset") {
        std::ofstream os("test_scene_bad.json");
        os << "{\"version\": \"1\", ";
        os.close();
        try {
            load_scene("test_scene_bad.json");
            FAIL("expected parse error");
        } catch (const json::parse_error& e) {
            CHECK(e.byte > 0);
        }
        std::remove("test_scene_bad.json");
    }
    std::remove(path.c_str());
}

TEST_CASE("scene field", "[scene]") {
    SynthConfig cfg;
    cfg.min_objects = cfg.max_objects = 2;
    cfg.ambient_sigma = 2.0;
    SyntheticScene s = synth_scene(cfg, 31);
    SceneField f(s);
    SECTION("interior density dominates ambient") {
        for (const SceneObject& o : s.objects) {
            CHECK(f.density_at(o.box.center) == o.sigma);
            CHECK(density_to_alpha(f.density_at(o.box.center)) >
                  density_to_alpha(3.0));  // ambient stays below 1.5x nominal
        }
    }
    SECTION("ambient noise stays non-negative and bounded") {
        Rng rng(77);
        for (int i = 0; i < 500; ++i) {
            Vec3 p{rng.uniform(0, s.room.max.x), rng.uniform(0, s.room.max.y),
                   rng.uniform(0, s.room.max.z)};
            double d = f.density_at(p);
            CHECK(d >= 0.0);
            CHECK(d <= 80.0);
        }
    }
    SECTION("radiance is in range and direction dependent") {
        Rng rng(78);
        for (int i = 0; i < 200; ++i) {
            Vec3 p{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 5)};
            double z = rng.uniform(-1, 1), az = rng.uniform(0, 2 * kPi);
            double rr = std::sqrt(1 - z * z);
            Vec3 d{rr * std::cos(az), rr * std::sin(az), z};
            Vec3 rgb = f.radiance_at(p, d);
            for (int c = 0; c < 3; ++c) {
                CHECK(rgb[c] >= 0.0);
                CHECK(rgb[c] <= 1.0);
            }
        }
        Vec3 l{1, 1, 1};
        CHECK((f.radiance_at({1, 1, 1}, l.normalized()) -
               f.radiance_at({1, 1, 1}, (l * -1.0).normalized()))
                  .norm() > 1e-3);
    }
    SECTION("hollow objects have an empty cavity") {
        SynthConfig hc = cfg;
        hc.hollow = true;
        hc.min_size = {2, 2, 2};
        hc.ambient_sigma = 0.0;
        hc.sigma_min = 30;
        SyntheticScene hs = synth_scene(hc, 7);
        SceneField hf(hs);
        const SceneObject& o = hs.objects[0];
        CHECK(hf.density_at(o.box.center) == 0.0);
        // a point just inside a face is in the wall
        Vec3 face = o.box.center + Mat3::rot_z(o.box.yaw) * Vec3{o.box.size.x / 2 - 0.05, 0, 0};
        CHECK(hf.density_at(face) == o.sigma);
    }
}
