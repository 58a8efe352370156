#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <sstream>

#include "p4c/harness.hpp"
#include "p4c/model.hpp"

using namespace p4c;

namespace {

Scene make_scene(std::uint64_t seed = 3) {
    SceneConfig cfg;
    cfg.primitives = 4;
    cfg.points_per_primitive = 64;
    cfg.extent = 1.0;
    cfg.class_table = make_class_table(seed, cfg.primitives);
    return generate_scene(seed, cfg);
}

/// H = D = 6 so the first layer can be the identity and the second can pick
/// out the own-hidden half.
EncoderParams passthrough_params() {
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 6, 6, 1, 1);
    p.t.W1 = Eigen::MatrixXd::Identity(6, 6);
    p.t.b1.setZero();
    p.t.W2 = Eigen::MatrixXd::Zero(6, 12);
    p.t.W2.leftCols(6) = Eigen::MatrixXd::Identity(6, 6);
    p.t.b2.setZero();
    p.t.V1 = p.t.W1;
    p.t.bv1 = p.t.b1;
    p.t.V2 = p.t.W2;
    p.t.bv2 = p.t.b2;
    return p;
}

}  // namespace

TEST_CASE("a passthrough encoder returns the normalized relu image of its input") {
    EncoderParams p = passthrough_params();
    Eigen::MatrixXd x(3, 6);
    x << 0.5, -0.25, 1.0, 0.1, 0.9, -0.4,
         1.5, 0.75, -2.0, 0.3, 0.0, 0.8,
         -0.1, 0.2, 0.3, -0.5, 0.6, 0.7;
    Eigen::MatrixXi nb(3, 1);
    nb << 0, 1, 2;  // each row is its own neighbor: aggregation collapses
    Eigen::MatrixXd f = encode3d(x, x, nb, p);
    for (int r = 0; r < 3; ++r) {
        Eigen::VectorXd expect = x.row(r).transpose().cwiseMax(0.0);
        expect /= expect.norm();
        REQUIRE((f.col(r) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    // identical computation on the 2D branch weights
    Eigen::MatrixXd f2 = encode2d(x, x, nb, p);
    REQUIRE((f2 - f).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero weights with a bias collapse every feature to normalize(b2)") {
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 6, 6, 1, 1);
    p.t.W1.setZero();
    p.t.b1.setZero();
    p.t.W2.setZero();
    p.t.b2 << 1, 2, 3, 4, 5, 6;
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(4, 6);
    Eigen::MatrixXi nb = Eigen::MatrixXi::Zero(4, 1);
    Eigen::MatrixXd f = encode3d(x, x, nb, p);
    Eigen::VectorXd expect = p.t.b2 / p.t.b2.norm();
    for (int r = 0; r < 4; ++r) REQUIRE((f.col(r) - expect).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(collapse_metric(f) == Catch::Approx(1.0));
}

TEST_CASE("encoded features are unit within 1e-9") {
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 16, 8, 3, 7);
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(32, 6);
    Eigen::MatrixXi nb(8, 3);
    for (int r = 0; r < 8; ++r)
        for (int j = 0; j < 3; ++j) nb(r, j) = (r * 5 + j) % 32;
    Eigen::MatrixXd own = x.topRows(8);
    for (const Eigen::MatrixXd& f : {encode3d(x, own, nb, p), encode2d(x, own, nb, p)})
        for (int r = 0; r < 8; ++r) REQUIRE(std::abs(f.col(r).norm() - 1.0) < 1e-9);
}

TEST_CASE("a zero pre-normalization vector is a degenerate-feature error") {
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 6, 6, 1, 1);
    p.t.W1.setZero();
    p.t.b1.setZero();
    p.t.W2.setZero();
    p.t.b2.setZero();
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(2, 6);
    Eigen::MatrixXi nb = Eigen::MatrixXi::Zero(2, 1);
    REQUIRE_THROWS_AS(encode3d(x, x, nb, p), contract_error);
}

TEST_CASE("fuse obeys the mode algebra") {
    Eigen::MatrixXd f3 = Eigen::MatrixXd::Random(8, 5);
    Eigen::MatrixXd f2 = Eigen::MatrixXd::Random(8, 5);
    for (int c = 0; c < 5; ++c) {
        f3.col(c) /= f3.col(c).norm();
        f2.col(c) /= f2.col(c).norm();
    }
    REQUIRE(fuse(f3, f2, FusionMode::Early) == f3);

    Eigen::MatrixXd same = fuse(f3, f3, FusionMode::Hybrid);
    for (int c = 0; c < 5; ++c) {
        REQUIRE(std::abs(same.col(c).norm() - 1.0) < 1e-9);
        REQUIRE((same.col(c).head(8) - f3.col(c) / std::sqrt(2.0)).cwiseAbs().maxCoeff() < 1e-12);
    }
    for (FusionMode m : {FusionMode::Late, FusionMode::Hybrid}) {
        Eigen::MatrixXd f = fuse(f3, f2, m);
        for (int c = 0; c < 5; ++c) REQUIRE(std::abs(f.col(c).norm() - 1.0) < 1e-9);
    }
    Eigen::MatrixXd wrong = Eigen::MatrixXd::Random(8, 4);
    REQUIRE_THROWS_AS(fuse(f3, wrong, FusionMode::Hybrid), contract_error);
}

TEST_CASE("pixel-space and point-space neighborhoods diverge across a depth gap") {
    // two parallel plane patches that overlap in the image but sit 2 m apart
    const int per = 40;
    Scene s;
    s.points.resize(2 * per, 3);
    s.colors = Eigen::MatrixX3d::Constant(2 * per, 3, 0.5);
    s.labels.assign(2 * per, 0);
    s.num_classes = 1;
    s.extent = 5.0;
    Rng rng(8);
    for (int i = 0; i < per; ++i) {
        s.points.row(i) = Eigen::RowVector3d(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 2.0);
        s.points.row(per + i) = Eigen::RowVector3d(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 4.0);
    }
    Camera cam;
    cam.fx = cam.fy = 44.8;
    cam.cx = cam.cy = 31.5;
    cam.width = cam.height = 64;

    Eigen::MatrixXd uv(2 * per, 2);
    for (int i = 0; i < 2 * per; ++i) {
        Eigen::Vector3d pc = cam.to_camera(s.points.row(i));
        uv.row(i) = Eigen::RowVector2d(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy);
    }
    std::vector<int> rows(per);
    std::iota(rows.begin(), rows.end(), 0);  // front-plane points
    Eigen::MatrixXi nb3 = detail::knn_indices(s.points, rows, 5);
    Eigen::MatrixXi nb2 = detail::knn_indices(uv, rows, 5);
    REQUIRE(nb3.maxCoeff() < per);  // 3D context never crosses the 2 m gap
    bool differs = false;
    for (int r = 0; r < per && !differs; ++r)
        for (int j = 0; j < 5; ++j)
            if (nb2(r, j) >= per) {
                differs = true;
                break;
            }
    REQUIRE(differs);
}

TEST_CASE("smooth scenes give closer features for grid-adjacent pixels than for random pairs") {
    // plane facing the camera with colors varying smoothly in (x, y)
    const int side = 16;
    Scene s;
    s.points.resize(side * side, 3);
    s.colors.resize(side * side, 3);
    s.labels.assign(side * side, 0);
    s.num_classes = 1;
    s.extent = 1.0;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            int i = y * side + x;
            double fx = double(x) / (side - 1), fy = double(y) / (side - 1);
            s.points.row(i) = Eigen::RowVector3d(2 * fx - 1, 2 * fy - 1, 0.0);
            s.colors.row(i) = Eigen::RowVector3d(0.2 + 0.6 * fx, 0.2 + 0.6 * fy, 0.5);
        }
    AugmentConfig aug;
    aug.sigma_xyz = 0.0;
    aug.sigma_rgb = 0.0;
    ViewPair pair = make_views(s, aug, 3);

    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 16, 8, 4, 21);
    std::vector<int> rows(side * side);
    std::iota(rows.begin(), rows.end(), 0);
    Eigen::MatrixXd x2(side * side, 6);
    x2.col(0) = pair.v1.proj.col(0) / 64.0;
    x2.col(1) = pair.v1.proj.col(1) / 64.0;
    x2.middleCols(2, 3) = pair.v1.scene.colors;
    x2.col(5) = pair.v1.proj.col(2);
    Eigen::MatrixXi nb2 = detail::knn_indices(pair.v1.proj.leftCols(2), rows, 4);
    Eigen::MatrixXd f = encode2d(x2, x2, nb2, p);

    Rng rng(4);
    double adjacent = 0.0, random = 0.0;
    int count = 0;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x + 1 < side; ++x) {
            int i = y * side + x;
            adjacent += (f.col(i) - f.col(i + 1)).norm();
            int a = int(rng.index(side * side)), b = int(rng.index(side * side));
            random += (f.col(a) - f.col(b)).norm();
            ++count;
        }
    REQUIRE(adjacent / count < random / count);
}

TEST_CASE("disturbed rows splice geometry from k with the color of d(k)") {
    Scene s = make_scene();
    AugmentConfig aug;
    ViewPair views = make_views(s, aug, 19);
    HardnessSchedule sched{1.0, 0.01, 20.0};
    Rng rng(5);
    PairBatch batch = build_pair_batch(views, 100, 8, sched, rng);
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 8, 8, 3, 3);
    ModelInputs in = assemble_inputs(views, batch, p, MaskStyle::Full, true);

    for (int k = 0; k < 8; ++k) {
        int pk = batch.positive_idx[k];
        int dk = batch.disturb[k];
        REQUIRE(dk != pk);  // never [g_k | c_k]
        // 3D-branch input: geometry of p_k, color of d(k), both view 2
        REQUIRE(in.disturbed.own3.row(k).head(3) == views.v2.scene.points.row(pk));
        REQUIRE(in.disturbed.own3.row(k).tail(3) == views.v2.scene.colors.row(dk));
        // 2D-branch input: pixel position and depth of p_k, color of d(k)
        REQUIRE(in.disturbed.own2(k, 0) == Catch::Approx(views.v2.proj(pk, 0) / 64.0));
        REQUIRE(in.disturbed.own2(k, 5) == Catch::Approx(views.v2.proj(pk, 2)));
        REQUIRE(in.disturbed.own2.row(k).segment(2, 3) == views.v2.scene.colors.row(dk));
        // neighborhoods follow the geometry point
        REQUIRE(in.disturbed.nb3.row(k) == in.positives.nb3.row(k));
    }
}

TEST_CASE("forward is deterministic and batch-permutation equivariant") {
    Scene s = make_scene();
    AugmentConfig aug;
    ViewPair views = make_views(s, aug, 23);
    HardnessSchedule sched{1.0, 0.01, 20.0};
    Rng rng(9);
    PairBatch batch = build_pair_batch(views, 50, 6, sched, rng);
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 8, 8, 3, 11);
    ModelInputs in = assemble_inputs(views, batch, p, MaskStyle::Full, true);

    ForwardResult a = forward(in, p);
    ForwardResult b = forward(in, p);
    REQUIRE(a.f_anchor == b.f_anchor);
    REQUIRE(a.f_positive == b.f_positive);
    REQUIRE(a.f_disturb == b.f_disturb);

    // permute the anchor rows
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    ModelInputs in2 = in;
    for (int r = 0; r < 6; ++r) {
        in2.anchors.own3.row(r) = in.anchors.own3.row(perm[r]);
        in2.anchors.own2.row(r) = in.anchors.own2.row(perm[r]);
        in2.anchors.nb3.row(r) = in.anchors.nb3.row(perm[r]);
        in2.anchors.nb2.row(r) = in.anchors.nb2.row(perm[r]);
    }
    ForwardResult c = forward(in2, p);
    for (int r = 0; r < 6; ++r)
        REQUIRE((c.f_anchor.col(r) - a.f_anchor.col(perm[r])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero upstream gradients give zero parameter gradients") {
    Scene s = make_scene();
    AugmentConfig aug;
    ViewPair views = make_views(s, aug, 29);
    HardnessSchedule sched{1.0, 0.01, 20.0};
    Rng rng(13);
    PairBatch batch = build_pair_batch(views, 10, 4, sched, rng);
    EncoderParams p = EncoderParams::init(FusionMode::Hybrid, 8, 8, 3, 5);
    ModelInputs in = assemble_inputs(views, batch, p, MaskStyle::Full, true);
    ForwardResult r = forward(in, p);
    TensorSet g = backward(in, p, r.cache,
                           Eigen::MatrixXd::Zero(r.f_anchor.rows(), r.f_anchor.cols()),
                           Eigen::MatrixXd::Zero(r.f_positive.rows(), r.f_positive.cols()),
                           Eigen::MatrixXd::Zero(r.f_disturb.rows(), r.f_disturb.cols()));
    g.visit([](const char*, bool, const auto& m) { REQUIRE(m.cwiseAbs().maxCoeff() == 0.0); });
}

TEST_CASE("analytic gradients match finite differences for every fusion mode") {
    for (FusionMode fusion : {FusionMode::Early, FusionMode::Late, FusionMode::Hybrid}) {
        GradCheckResult r = gradient_check(2, fusion, false, Objective::P4Contrast, 991);
        INFO("fusion " << to_string(fusion));
        REQUIRE(r.max_rel_err < 1e-5);
    }
    GradCheckResult cm = gradient_check(2, FusionMode::Late, false, Objective::CrossModal, 313);
    REQUIRE(cm.max_rel_err < 1e-5);
    GradCheckResult pc = gradient_check(2, FusionMode::Early, true, Objective::PointContrast, 717);
    REQUIRE(pc.max_rel_err < 1e-5);
}

TEST_CASE("late masking hides the opposite modality from each branch") {
    Scene s = make_scene();
    AugmentConfig aug;
    ViewPair views = make_views(s, aug, 37);
    HardnessSchedule sched{1.0, 0.01, 20.0};
    Rng rng(17);
    PairBatch batch = build_pair_batch(views, 0, 4, sched, rng);
    EncoderParams p = EncoderParams::init(FusionMode::Late, 8, 8, 3, 5);
    ModelInputs in = assemble_inputs(views, batch, p, MaskStyle::LateMasked, false);
    for (int v = 0; v < 2; ++v) {
        REQUIRE(in.tables.x3[v].rightCols(3).cwiseAbs().maxCoeff() == 0.0);  // no rgb into 3D
        REQUIRE(in.tables.x2[v].col(0).cwiseAbs().maxCoeff() == 0.0);        // no position into 2D
        REQUIRE(in.tables.x2[v].col(1).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(in.tables.x2[v].col(5).cwiseAbs().maxCoeff() == 0.0);        // no depth into 2D
    }
}

TEST_CASE("checkpoints round trip bit for bit") {
    EncoderParams p = EncoderParams::init(FusionMode::Late, 12, 8, 5, 99);
    std::stringstream buf;
    save_checkpoint(buf, p);
    EncoderParams q = load_checkpoint(buf);
    REQUIRE(q.fusion == p.fusion);
    REQUIRE(q.hidden == p.hidden);
    REQUIRE(q.dim == p.dim);
    REQUIRE(q.knn_k == p.knn_k);
    REQUIRE(q.t.W1 == p.t.W1);
    REQUIRE(q.t.b1 == p.t.b1);
    REQUIRE(q.t.W2 == p.t.W2);
    REQUIRE(q.t.V1 == p.t.V1);
    REQUIRE(q.t.bv2 == p.t.bv2);
}

TEST_CASE("parameter validation enforces the size floors") {
    REQUIRE_THROWS_AS(EncoderParams::init(FusionMode::Early, 2, 8, 3, 1), config_error);
    REQUIRE_THROWS_AS(EncoderParams::init(FusionMode::Early, 8, 2, 3, 1), config_error);
    REQUIRE_THROWS_AS(EncoderParams::init(FusionMode::Early, 8, 8, 0, 1), config_error);
}
