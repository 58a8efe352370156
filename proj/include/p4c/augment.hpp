#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "p4c/common.hpp"
#include "p4c/scene.hpp"

namespace p4c {

/// Augmentation switches. Gaussian jitter of points and colors is the base
/// strategy; the geometric flags and multi-view rendering are applied on top
/// of it, and exist mainly as the ablation zoo.
struct AugmentConfig {
    double sigma_xyz = 0.02;  // meters
    double sigma_rgb = 0.05;  // color units
    bool rot = false, scal = false, trans = false, flip = false, mvr = false;
    double rot_range = M_PI;    // radians, angle uniform in [-range, range]
    double scal_range = 0.25;   // scale uniform in [1-range, 1+range]
    double trans_range = 0.25;  // meters, per-axis uniform in [-range, range]
    int render_width = 64, render_height = 64;

    void validate() const {
        if (!(sigma_xyz >= 0.0) || !std::isfinite(sigma_xyz)) throw config_error("sigma_xyz must be finite and >= 0");
        if (!(sigma_rgb >= 0.0) || !std::isfinite(sigma_rgb)) throw config_error("sigma_rgb must be finite and >= 0");
        for (double r : {rot_range, scal_range, trans_range})
            if (!std::isfinite(r) || r < 0.0) throw config_error("augmentation range must be finite and >= 0");
        if (render_width <= 0 || render_height <= 0) throw config_error("render resolution must be positive");
    }

    /// Comma list of enabled mode names, Table-7 spelling.
    std::string mode_string() const {
        std::string s = "jitter";
        if (rot) s += ",rot";
        if (scal) s += ",scal";
        if (trans) s += ",trans";
        if (flip) s += ",flip";
        if (mvr) s += ",mvr";
        return s;
    }
};

/// Parses a comma list of {jitter, rot, scal, trans, flip, mvr} into flags.
inline void parse_aug_modes(const std::string& modes, AugmentConfig& cfg) {
    cfg.rot = cfg.scal = cfg.trans = cfg.flip = cfg.mvr = false;
    std::size_t start = 0;
    while (start <= modes.size()) {
        std::size_t end = modes.find(',', start);
        if (end == std::string::npos) end = modes.size();
        std::string tok = modes.substr(start, end - start);
        // trim
        while (!tok.empty() && tok.front() == ' ') tok.erase(tok.begin());
        while (!tok.empty() && tok.back() == ' ') tok.pop_back();
        if (tok == "jitter" || tok.empty()) {
            // base strategy, always on
        } else if (tok == "rot") {
            cfg.rot = true;
        } else if (tok == "scal") {
            cfg.scal = true;
        } else if (tok == "trans") {
            cfg.trans = true;
        } else if (tok == "flip") {
            cfg.flip = true;
        } else if (tok == "mvr") {
            cfg.mvr = true;
        } else {
            throw config_error("unknown augmentation mode: " + tok);
        }
        start = end + 1;
    }
}

/// Gaussian noise on point coordinates and colors. Labels and point order are
/// untouched, so index i refers to the same scene point before and after.
inline Scene jitter(const Scene& scene, double sigma_xyz, double sigma_rgb, std::uint64_t seed) {
    if (sigma_xyz < 0.0 || sigma_rgb < 0.0) throw config_error("jitter sigma must be >= 0");
    Rng rng = Rng(seed).child(0x71e7);
    Scene out = scene;
    for (int i = 0; i < out.size(); ++i) {
        for (int c = 0; c < 3; ++c) out.points(i, c) += sigma_xyz * rng.normal();
        for (int c = 0; c < 3; ++c)
            out.colors(i, c) = std::clamp(out.colors(i, c) + sigma_rgb * rng.normal(), 0.0, 1.0);
    }
    return out;
}

/// One augmented view: transformed scene, the camera it was rendered with,
/// the render, and the exact per-point projection (u, v, z_c) under that
/// camera. `proj_valid` is false for points behind the camera plane.
struct ViewData {
    Scene scene;
    Camera cam;
    RGBDImage image;
    Eigen::MatrixX3d proj;  // N x (u, v, z_c)
    std::vector<char> proj_valid;
};

struct ViewPair {
    ViewData v1, v2;
    // Ground-truth correspondence: the identity bijection restricted to these
    // point indices (all points for jitter-style modes, co-visible points for
    // multi-view rendering).
    std::vector<int> corr;
};

namespace detail {

inline void fill_projection(ViewData& view) {
    const int n = view.scene.size();
    view.proj.resize(n, 3);
    view.proj_valid.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        Eigen::Vector3d pc = view.cam.to_camera(view.scene.points.row(i));
        if (pc.z() > 1e-9) {
            view.proj(i, 0) = view.cam.fx * pc.x() / pc.z() + view.cam.cx;
            view.proj(i, 1) = view.cam.fy * pc.y() / pc.z() + view.cam.cy;
            view.proj(i, 2) = pc.z();
            view.proj_valid[i] = 1;
        } else {
            view.proj.row(i).setZero();
        }
    }
}

inline Scene transform_scene(const Scene& scene, const AugmentConfig& cfg, Rng rng) {
    Scene out = jitter(scene, cfg.sigma_xyz, cfg.sigma_rgb, rng.child(0).seed());
    Rng geo = rng.child(1);
    if (cfg.rot) {
        Eigen::Vector3d axis(geo.normal(), geo.normal(), geo.normal());
        while (axis.norm() < 1e-12) axis = {geo.normal(), geo.normal(), geo.normal()};
        double angle = geo.uniform(-cfg.rot_range, cfg.rot_range);
        Eigen::Matrix3d r = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
        out.points = (r * out.points.transpose()).transpose();
    }
    if (cfg.scal) {
        double s = geo.uniform(1.0 - cfg.scal_range, 1.0 + cfg.scal_range);
        out.points *= s;
    }
    if (cfg.trans) {
        Eigen::RowVector3d t(geo.uniform(-cfg.trans_range, cfg.trans_range),
                             geo.uniform(-cfg.trans_range, cfg.trans_range),
                             geo.uniform(-cfg.trans_range, cfg.trans_range));
        out.points.rowwise() += t;
    }
    if (cfg.flip) {
        int axis = int(geo.index(2));  // mirror x or y
        out.points.col(axis) *= -1.0;
    }
    return out;
}

inline Camera random_view_camera(const Scene& scene, const AugmentConfig& cfg, Rng& rng) {
    Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
    while (dir.norm() < 1e-12) dir = {rng.normal(), rng.normal(), rng.normal()};
    Eigen::Vector3d eye = dir.normalized() * 2.5 * scene.extent;
    return look_at_camera(eye, Eigen::Vector3d::Zero(), cfg.render_width, cfg.render_height);
}

}  // namespace detail

/// Builds the two transformed versions of a scene plus their ground-truth
/// correspondence. Both views draw independent noise. For multi-view
/// rendering the correspondence is the set of points winning a pixel in both
/// renders; cameras are resampled up to 16 times if fewer than 32 points
/// are shared.
inline ViewPair make_views(const Scene& scene, const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = Rng(seed).child(0x71e75);

    ViewPair pair;
    pair.v1.scene = detail::transform_scene(scene, cfg, rng.child(1));
    pair.v2.scene = detail::transform_scene(scene, cfg, rng.child(2));

    constexpr int kMinCorr = 32;
    constexpr int kMaxAttempts = 16;

    if (!cfg.mvr) {
        Camera cam = default_camera(scene.extent, cfg.render_width, cfg.render_height);
        pair.v1.cam = cam;
        pair.v2.cam = cam;
        pair.v1.image = project(pair.v1.scene, cam);
        pair.v2.image = project(pair.v2.scene, cam);
        detail::fill_projection(pair.v1);
        detail::fill_projection(pair.v2);
        pair.corr.reserve(scene.size());
        for (int i = 0; i < scene.size(); ++i)
            if (pair.v1.proj_valid[i] && pair.v2.proj_valid[i]) pair.corr.push_back(i);
        return pair;
    }

    Rng cam_rng = rng.child(3);
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        pair.v1.cam = detail::random_view_camera(pair.v1.scene, cfg, cam_rng);
        pair.v2.cam = detail::random_view_camera(pair.v2.scene, cfg, cam_rng);
        pair.v1.image = project(pair.v1.scene, pair.v1.cam);
        pair.v2.image = project(pair.v2.scene, pair.v2.cam);
        detail::fill_projection(pair.v1);
        detail::fill_projection(pair.v2);

        std::vector<char> seen1(scene.size(), 0), seen2(scene.size(), 0);
        for (int p = 0; p < pair.v1.image.width * pair.v1.image.height; ++p)
            if (pair.v1.image.occupied(p)) seen1[pair.v1.image.corr[p]] = 1;
        for (int p = 0; p < pair.v2.image.width * pair.v2.image.height; ++p)
            if (pair.v2.image.occupied(p)) seen2[pair.v2.image.corr[p]] = 1;

        pair.corr.clear();
        for (int i = 0; i < scene.size(); ++i)
            if (seen1[i] && seen2[i] && pair.v1.proj_valid[i] && pair.v2.proj_valid[i])
                pair.corr.push_back(i);
        if (int(pair.corr.size()) >= kMinCorr) return pair;
    }
    throw std::runtime_error("multi-view rendering found fewer than 32 shared points after 16 camera resamples");
}

}  // namespace p4c
