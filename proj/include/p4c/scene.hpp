#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <limits>
#include <vector>

#include "p4c/common.hpp"

namespace p4c {

/// Synthetic colored, labeled point cloud with known class semantics.
struct Scene {
    Eigen::MatrixX3d points;           // N x 3, meters
    Eigen::MatrixX3d colors;           // N x 3, in [0,1]
    std::vector<std::uint32_t> labels; // N, in [0, num_classes)
    std::uint32_t num_classes = 0;
    double extent = 0.0;               // half-width of the generation box

    int size() const { return int(points.rows()); }

    void validate() const {
        if (size() < 2) throw contract_error("scene needs at least 2 points");
        if (!(extent > 0.0)) throw contract_error("scene extent must be positive");
        if (colors.rows() != points.rows() || int(labels.size()) != size())
            throw contract_error("scene field sizes disagree");
        for (int i = 0; i < size(); ++i) {
            for (int c = 0; c < 3; ++c) {
                double x = points(i, c);
                if (!std::isfinite(x) || std::abs(x) > extent)
                    throw contract_error("scene point outside [-extent, extent]^3");
                double col = colors(i, c);
                if (!(col >= 0.0 && col <= 1.0)) throw contract_error("scene color outside [0,1]");
            }
            if (labels[i] >= num_classes) throw contract_error("scene label out of range");
        }
    }
};

struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0)) throw contract_error("camera focal lengths must be positive");
        if (width <= 0 || height <= 0) throw contract_error("camera resolution must be positive");
        Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
        if (err.cwiseAbs().maxCoeff() > 1e-9) throw contract_error("camera rotation is not orthonormal");
    }

    /// Camera-frame coordinates of a world point: R * (p - t).
    Eigen::Vector3d to_camera(const Eigen::Vector3d& p) const {
        return rotation * (p - translation);
    }
};

/// One rendered view. Occupied pixels keep the exact sub-pixel projection
/// coordinates of the z-buffer winner so the render stays invertible.
struct RGBDImage {
    int width = 0, height = 0;
    std::vector<std::array<double, 3>> rgb; // H*W, row-major, [0,1]
    std::vector<double> depth;              // H*W, meters, 0 = empty
    std::vector<std::int32_t> corr;         // H*W, point index or -1
    std::vector<std::array<double, 2>> uv;  // H*W, exact (u,v) of the winner

    int at(int x, int y) const { return y * width + x; }
    bool occupied(int p) const { return corr[p] >= 0; }
};

enum class ShapeKind { Plane, Sphere, Box };

/// Corpus-level semantics of one class pair: the two classes hosted by a
/// primitive slot. A geometry slot shares one color distribution between two
/// shapes; a color slot shares one shape between two colors. The table is
/// fixed per corpus so the same class id means the same concept in every
/// scene.
struct ClassPairSpec {
    bool color_discriminated = false; // false: shapes differ, true: colors differ
    ShapeKind shape_a = ShapeKind::Plane;
    ShapeKind shape_b = ShapeKind::Sphere;  // == shape_a for color slots
    Eigen::Vector3d color_a = Eigen::Vector3d::Constant(0.5);
    Eigen::Vector3d color_b = Eigen::Vector3d::Constant(0.5); // == color_a for geometry slots
};

struct SceneConfig {
    int primitives = 4;
    int points_per_primitive = 256;
    double extent = 1.0;
    double color_noise = 0.02;              // per-point spread around the class color
    std::vector<ClassPairSpec> class_table; // one entry per primitive slot

    void validate() const {
        if (primitives < 2) throw config_error("scene config needs at least 2 primitives");
        if (points_per_primitive < 16) throw config_error("scene config needs at least 16 points per primitive");
        if (!(extent > 0.0)) throw config_error("scene extent must be positive");
        if (int(class_table.size()) != primitives) throw config_error("class table size must equal primitive count");
    }

    std::uint32_t num_classes() const { return std::uint32_t(2 * primitives); }
};

/// Fixed class semantics for a corpus. Even slots are geometry-discriminated,
/// odd slots color-discriminated, so half the classes need shape and half
/// need color to be told apart.
inline std::vector<ClassPairSpec> make_class_table(std::uint64_t class_seed, int primitives) {
    Rng rng = Rng(class_seed).child(0x0c1a55);
    const ShapeKind kinds[3] = {ShapeKind::Plane, ShapeKind::Sphere, ShapeKind::Box};
    std::vector<ClassPairSpec> table;
    table.reserve(primitives);
    for (int p = 0; p < primitives; ++p) {
        ClassPairSpec spec;
        spec.color_discriminated = (p % 2 == 1);
        auto draw_color = [&] {
            return Eigen::Vector3d(rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85));
        };
        if (spec.color_discriminated) {
            spec.shape_a = spec.shape_b = kinds[rng.index(3)];
            spec.color_a = draw_color();
            // redraw until the two colors are far enough apart to be learnable
            do {
                spec.color_b = draw_color();
            } while ((spec.color_a - spec.color_b).norm() < 0.45);
        } else {
            spec.shape_a = kinds[rng.index(3)];
            do {
                spec.shape_b = kinds[rng.index(3)];
            } while (spec.shape_b == spec.shape_a);
            spec.color_a = spec.color_b = draw_color();
        }
        table.push_back(spec);
    }
    return table;
}

namespace detail {

inline Eigen::Vector3d sample_on_shape(ShapeKind kind, double radius, Rng& rng) {
    switch (kind) {
        case ShapeKind::Plane: {
            // axis-aligned square patch; the slot rotation re-orients it
            return {rng.uniform(-radius, radius), rng.uniform(-radius, radius), 0.0};
        }
        case ShapeKind::Sphere: {
            Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
            double n = v.norm();
            while (n < 1e-12) {
                v = {rng.normal(), rng.normal(), rng.normal()};
                n = v.norm();
            }
            return v / n * radius;
        }
        case ShapeKind::Box: {
            // uniform over the 6 faces of a cube with half-width radius
            int face = int(rng.index(6));
            double a = rng.uniform(-radius, radius), b = rng.uniform(-radius, radius);
            double s = (face % 2 == 0) ? radius : -radius;
            if (face / 2 == 0) return {s, a, b};
            if (face / 2 == 1) return {a, s, b};
            return {a, b, s};
        }
    }
    return Eigen::Vector3d::Zero();
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    double n = axis.norm();
    while (n < 1e-12) {
        axis = {rng.normal(), rng.normal(), rng.normal()};
        n = axis.norm();
    }
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    return Eigen::AngleAxisd(angle, axis / n).toRotationMatrix();
}

}  // namespace detail

/// Deterministic scene synthesis. Each primitive slot drops a cluster at a
/// random pose and splits its points into the slot's two classes.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
    cfg.validate();
    Rng rng = Rng(seed).child(0x5ce7e);

    const int n = cfg.primitives * cfg.points_per_primitive;
    Scene scene;
    scene.points.resize(n, 3);
    scene.colors.resize(n, 3);
    scene.labels.resize(n);
    scene.num_classes = cfg.num_classes();
    scene.extent = cfg.extent;

    const double cluster_radius = 0.22 * cfg.extent;
    int row = 0;
    for (int p = 0; p < cfg.primitives; ++p) {
        const ClassPairSpec& spec = cfg.class_table[p];
        Eigen::Vector3d center(rng.uniform(-0.6, 0.6) * cfg.extent,
                               rng.uniform(-0.6, 0.6) * cfg.extent,
                               rng.uniform(-0.6, 0.6) * cfg.extent);
        Eigen::Matrix3d orient = detail::random_rotation(rng);
        double radius = cluster_radius * rng.uniform(0.7, 1.3);
        for (int q = 0; q < cfg.points_per_primitive; ++q) {
            bool second = (q % 2 == 1); // interleaved halves: class a / class b
            ShapeKind kind = second ? spec.shape_b : spec.shape_a;
            const Eigen::Vector3d& base_color = second ? spec.color_b : spec.color_a;
            Eigen::Vector3d local = detail::sample_on_shape(kind, radius, rng);
            Eigen::Vector3d world = center + orient * local;
            for (int c = 0; c < 3; ++c)
                world[c] = std::clamp(world[c], -cfg.extent, cfg.extent);
            Eigen::Vector3d col = base_color;
            for (int c = 0; c < 3; ++c)
                col[c] = std::clamp(col[c] + cfg.color_noise * rng.normal(), 0.0, 1.0);
            scene.points.row(row) = world;
            scene.colors.row(row) = col;
            scene.labels[row] = std::uint32_t(2 * p + (second ? 1 : 0));
            ++row;
        }
    }
    return scene;
}

/// Default view of the generation box: axis-aligned, pulled back along -z far
/// enough that any augmented copy stays strictly in front of the camera.
inline Camera default_camera(double extent, int width = 64, int height = 64) {
    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = 0.7 * width;
    cam.cx = (width - 1) / 2.0;
    cam.cy = (height - 1) / 2.0;
    cam.rotation = Eigen::Matrix3d::Identity();
    cam.translation = Eigen::Vector3d(0.0, 0.0, -2.5 * extent);
    return cam;
}

/// Camera at `eye` looking at `target`, +z forward.
inline Camera look_at_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                             int width = 64, int height = 64) {
    Eigen::Vector3d fwd = (target - eye).normalized();
    Eigen::Vector3d up(0, 1, 0);
    if (std::abs(fwd.dot(up)) > 0.98) up = Eigen::Vector3d(1, 0, 0);
    Eigen::Vector3d right = up.cross(fwd).normalized();
    Eigen::Vector3d down = fwd.cross(right);
    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = 0.7 * width;
    cam.cx = (width - 1) / 2.0;
    cam.cy = (height - 1) / 2.0;
    cam.rotation.row(0) = right;
    cam.rotation.row(1) = down;
    cam.rotation.row(2) = fwd;
    cam.translation = eye;
    return cam;
}

/// Pinhole splat render with a nearest-depth z-buffer. Depth ties keep the
/// lower point index. Points behind the camera or outside the frame leave no
/// correspondence.
inline RGBDImage project(const Scene& scene, const Camera& cam) {
    cam.validate();
    if (scene.size() == 0) throw contract_error("cannot project an empty scene");

    RGBDImage img;
    img.width = cam.width;
    img.height = cam.height;
    const int npix = cam.width * cam.height;
    img.rgb.assign(npix, {0.0, 0.0, 0.0});
    img.depth.assign(npix, 0.0);
    img.corr.assign(npix, -1);
    img.uv.assign(npix, {0.0, 0.0});

    for (int i = 0; i < scene.size(); ++i) {
        Eigen::Vector3d pc = cam.to_camera(scene.points.row(i));
        if (pc.z() <= 0.0) continue;
        double u = cam.fx * pc.x() / pc.z() + cam.cx;
        double v = cam.fy * pc.y() / pc.z() + cam.cy;
        int px = int(std::lround(u));
        int py = int(std::lround(v));
        if (px < 0 || px >= cam.width || py < 0 || py >= cam.height) continue;
        int p = img.at(px, py);
        if (img.corr[p] >= 0 && img.depth[p] <= pc.z()) continue;
        img.corr[p] = i;
        img.depth[p] = pc.z();
        img.uv[p] = {u, v};
        img.rgb[p] = {scene.colors(i, 0), scene.colors(i, 1), scene.colors(i, 2)};
    }
    return img;
}

/// Inverts the pinhole map at every occupied pixel using the stored depth and
/// sub-pixel coordinates. Returns (point, source index) pairs.
inline std::vector<std::pair<Eigen::Vector3d, int>> backproject(const RGBDImage& img, const Camera& cam) {
    std::vector<std::pair<Eigen::Vector3d, int>> out;
    Eigen::Matrix3d rt = cam.rotation.transpose();
    for (int p = 0; p < img.width * img.height; ++p) {
        if (!img.occupied(p)) continue;
        double z = img.depth[p];
        double x = (img.uv[p][0] - cam.cx) * z / cam.fx;
        double y = (img.uv[p][1] - cam.cy) * z / cam.fy;
        out.emplace_back(rt * Eigen::Vector3d(x, y, z) + cam.translation, img.corr[p]);
    }
    return out;
}

inline constexpr char kSceneMagic[9] = "P4CSCN01";

inline void save_scene(std::ostream& os, const Scene& scene) {
    io::write_magic(os, kSceneMagic);
    io::write_le<std::uint64_t>(os, std::uint64_t(scene.size()));
    io::write_le<std::uint64_t>(os, scene.num_classes);
    io::write_le<double>(os, scene.extent);
    for (int i = 0; i < scene.size(); ++i)
        for (int c = 0; c < 3; ++c) io::write_le<double>(os, scene.points(i, c));
    for (int i = 0; i < scene.size(); ++i)
        for (int c = 0; c < 3; ++c) io::write_le<double>(os, scene.colors(i, c));
    for (int i = 0; i < scene.size(); ++i) io::write_le<std::uint32_t>(os, scene.labels[i]);
}

inline Scene load_scene(std::istream& is) {
    io::expect_magic(is, kSceneMagic);
    Scene scene;
    auto n = io::read_le<std::uint64_t>(is);
    scene.num_classes = std::uint32_t(io::read_le<std::uint64_t>(is));
    scene.extent = io::read_le<double>(is);
    scene.points.resize(Eigen::Index(n), 3);
    scene.colors.resize(Eigen::Index(n), 3);
    scene.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) scene.points(Eigen::Index(i), c) = io::read_le<double>(is);
    for (std::uint64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) scene.colors(Eigen::Index(i), c) = io::read_le<double>(is);
    for (std::uint64_t i = 0; i < n; ++i) scene.labels[i] = io::read_le<std::uint32_t>(is);
    scene.validate();
    return scene;
}

inline void save_scene_file(const std::string& path, const Scene& scene) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw config_error("cannot open scene file for writing: " + path);
    save_scene(os, scene);
}

inline Scene load_scene_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw config_error("cannot open scene file: " + path);
    return load_scene(is);
}

}  // namespace p4c
