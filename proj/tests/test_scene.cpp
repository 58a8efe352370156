#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "p4c/scene.hpp"

using namespace p4c;

namespace {

SceneConfig default_cfg(std::uint64_t class_seed = 7) {
    SceneConfig cfg;
    cfg.primitives = 4;
    cfg.points_per_primitive = 256;
    cfg.extent = 1.0;
    cfg.class_table = make_class_table(class_seed, cfg.primitives);
    return cfg;
}

}  // namespace

TEST_CASE("generate_scene obeys the configured counts") {
    Scene s = generate_scene(1, default_cfg());
    REQUIRE(s.size() == 1024);
    REQUIRE(s.num_classes == 8);
    REQUIRE_NOTHROW(s.validate());
    std::set<std::uint32_t> seen(s.labels.begin(), s.labels.end());
    REQUIRE(seen.size() == 8);
}

TEST_CASE("generate_scene is deterministic in (seed, cfg)") {
    Scene a = generate_scene(1, default_cfg());
    Scene b = generate_scene(1, default_cfg());
    REQUIRE(a.points == b.points);
    REQUIRE(a.colors == b.colors);
    REQUIRE(a.labels == b.labels);
}

TEST_CASE("different seeds give different scenes") {
    Scene a = generate_scene(1, default_cfg());
    Scene b = generate_scene(2, default_cfg());
    REQUIRE((a.points - b.points).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("generate_scene rejects invalid configs") {
    SceneConfig cfg = default_cfg();
    cfg.primitives = 0;
    cfg.class_table.clear();
    REQUIRE_THROWS_AS(generate_scene(1, cfg), config_error);
    cfg = default_cfg();
    cfg.extent = -1.0;
    REQUIRE_THROWS_AS(generate_scene(1, cfg), config_error);
    cfg = default_cfg();
    cfg.points_per_primitive = 8;
    REQUIRE_THROWS_AS(generate_scene(1, cfg), config_error);
}

TEST_CASE("class table alternates geometry and color discrimination") {
    auto table = make_class_table(3, 4);
    REQUIRE(table.size() == 4);
    for (int p = 0; p < 4; ++p) {
        if (p % 2 == 0) {
            REQUIRE_FALSE(table[p].color_discriminated);
            REQUIRE(table[p].shape_a != table[p].shape_b);
            REQUIRE(table[p].color_a == table[p].color_b);
        } else {
            REQUIRE(table[p].color_discriminated);
            REQUIRE(table[p].shape_a == table[p].shape_b);
            REQUIRE((table[p].color_a - table[p].color_b).norm() >= 0.45);
        }
    }
}

TEST_CASE("a point on the optical axis lands at the principal point") {
    Scene s;
    s.points.resize(2, 3);
    s.points << 0, 0, 2, 0.5, 0.5, 2;
    s.colors.resize(2, 3);
    s.colors << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
    s.labels = {0, 1};
    s.num_classes = 2;
    s.extent = 2.0;

    Camera cam;
    cam.fx = cam.fy = 50.0;
    cam.cx = 31.5;
    cam.cy = 31.5;
    cam.width = cam.height = 64;

    RGBDImage img = project(s, cam);
    int px = int(std::lround(cam.cx)), py = int(std::lround(cam.cy));
    int p = img.at(px, py);
    REQUIRE(img.corr[p] == 0);
    REQUIRE(img.depth[p] == Catch::Approx(2.0));
    REQUIRE(img.rgb[p][0] == Catch::Approx(0.1));
}

TEST_CASE("an empty frustum leaves every pixel unoccupied") {
    Scene s;
    s.points.resize(2, 3);
    s.points << 0, 0, -2, 0.3, 0.1, -1;  // both behind the camera
    s.colors = Eigen::MatrixX3d::Constant(2, 3, 0.5);
    s.labels = {0, 0};
    s.num_classes = 1;
    s.extent = 2.0;

    Camera cam;
    cam.fx = cam.fy = 50.0;
    cam.cx = cam.cy = 31.5;
    cam.width = cam.height = 64;

    RGBDImage img = project(s, cam);
    for (int p = 0; p < 64 * 64; ++p) {
        REQUIRE(img.corr[p] == -1);
        REQUIRE(img.depth[p] == 0.0);
    }
}

TEST_CASE("backproject inverts the identity-pose principal pixel") {
    RGBDImage img;
    img.width = img.height = 8;
    img.rgb.assign(64, {0, 0, 0});
    img.depth.assign(64, 0.0);
    img.corr.assign(64, -1);
    img.uv.assign(64, {0.0, 0.0});
    Camera cam;
    cam.fx = cam.fy = 10.0;
    cam.cx = cam.cy = 3.5;
    cam.width = cam.height = 8;
    int p = img.at(4, 4);
    img.corr[p] = 0;
    img.depth[p] = 1.5;
    img.uv[p] = {cam.cx, cam.cy};

    auto pts = backproject(img, cam);
    REQUIRE(pts.size() == 1);
    REQUIRE((pts[0].first - Eigen::Vector3d(0, 0, 1.5)).norm() < 1e-12);
}

TEST_CASE("projection round trip recovers the source points within 1e-9 m") {
    Scene s = generate_scene(11, default_cfg());
    Camera cam = default_camera(s.extent);
    RGBDImage img = project(s, cam);
    auto pts = backproject(img, cam);
    REQUIRE(pts.size() > 100);
    double worst = 0.0;
    for (const auto& [point, idx] : pts)
        worst = std::max(worst, (point - Eigen::Vector3d(s.points.row(idx))).norm());
    REQUIRE(worst < 1e-9);
}

TEST_CASE("no point index wins two pixels") {
    Scene s = generate_scene(5, default_cfg());
    Camera cam = default_camera(s.extent);
    RGBDImage img = project(s, cam);
    std::set<int> seen;
    int occupied = 0;
    for (int p = 0; p < img.width * img.height; ++p) {
        if (!img.occupied(p)) continue;
        ++occupied;
        REQUIRE(seen.insert(img.corr[p]).second);
        REQUIRE(img.depth[p] > 0.0);
        REQUIRE(img.corr[p] < s.size());
    }
    REQUIRE(occupied > 0);
}

TEST_CASE("scene serialization round trips") {
    Scene s = generate_scene(42, default_cfg());
    std::stringstream buf;
    save_scene(buf, s);
    Scene r = load_scene(buf);
    REQUIRE(r.points == s.points);
    REQUIRE(r.colors == s.colors);
    REQUIRE(r.labels == s.labels);
    REQUIRE(r.num_classes == s.num_classes);
    REQUIRE(r.extent == s.extent);
}

TEST_CASE("scene loading rejects a bad magic") {
    std::stringstream buf;
    buf << "NOTMAGIC" << std::string(64, '\0');
    REQUIRE_THROWS_AS(load_scene(buf), contract_error);
}

TEST_CASE("camera validation catches a non-orthonormal rotation") {
    Camera cam;
    cam.fx = cam.fy = 10;
    cam.width = cam.height = 8;
    cam.rotation(0, 1) = 0.5;
    REQUIRE_THROWS_AS(cam.validate(), contract_error);
}
