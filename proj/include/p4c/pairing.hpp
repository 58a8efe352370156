#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "p4c/augment.hpp"
#include "p4c/common.hpp"

namespace p4c {

/// Parameters of the clipped linear hardness lower bound, in 1/meters.
struct HardnessSchedule {
    double h0 = 1.0;
    double slope = 0.0;   // per iteration
    double epsilon = 20.0;

    void validate() const {
        if (!(h0 > 0.0)) throw config_error("hardness h0 must be positive");
        if (!(slope >= 0.0)) throw config_error("hardness slope must be >= 0");
        if (!(epsilon >= h0)) throw config_error("hardness epsilon must be >= h0");
    }
};

/// Reciprocal distance between the anchor point and the point whose pixel was
/// spliced in. Coincident points cannot be disturbed against each other.
inline double hardness(const Eigen::Vector3d& p, const Eigen::Vector3d& q) {
    double d = (p - q).norm();
    if (d < 1e-9) throw contract_error("degenerate pair: points closer than 1e-9 m");
    return 1.0 / d;
}

/// Lower bound on disturbance hardness at iteration k: min(h0 + slope*k, eps).
inline double hardness_bound(std::int64_t k, const HardnessSchedule& s) {
    if (k < 0) throw contract_error("iteration must be >= 0");
    return std::min(s.h0 + s.slope * double(k), s.epsilon);
}

/// Uniform hash grid over 3D points. Radius queries return a candidate
/// superset (cells touching the ball); callers filter by exact distance.
class SpatialGrid {
  public:
    SpatialGrid(const Eigen::MatrixX3d& points, double cell_size)
        : points_(points), cell_(cell_size > 0 ? cell_size : 1.0) {
        min_ = points.colwise().minCoeff();
        for (int i = 0; i < points.rows(); ++i) cells_[key(points.row(i))].push_back(i);
    }

    /// Indices of points in cells intersecting the ball. Falls back to the
    /// full index range when visiting cells would cost more than a scan.
    void radius_candidates(const Eigen::Vector3d& center, double radius, std::vector<int>& out) const {
        out.clear();
        Eigen::Vector3i lo = cell_coord(center - Eigen::Vector3d::Constant(radius));
        Eigen::Vector3i hi = cell_coord(center + Eigen::Vector3d::Constant(radius));
        std::int64_t span = std::int64_t(hi.x() - lo.x() + 1) * (hi.y() - lo.y() + 1) * (hi.z() - lo.z() + 1);
        if (span >= std::int64_t(points_.rows())) {
            out.resize(points_.rows());
            for (int i = 0; i < points_.rows(); ++i) out[i] = i;
            return;
        }
        for (int x = lo.x(); x <= hi.x(); ++x)
            for (int y = lo.y(); y <= hi.y(); ++y)
                for (int z = lo.z(); z <= hi.z(); ++z) {
                    auto it = cells_.find(pack(x, y, z));
                    if (it != cells_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
                }
    }

  private:
    Eigen::Vector3i cell_coord(const Eigen::Vector3d& p) const {
        return {int(std::floor((p.x() - min_.x()) / cell_)),
                int(std::floor((p.y() - min_.y()) / cell_)),
                int(std::floor((p.z() - min_.z()) / cell_))};
    }
    static std::int64_t pack(int x, int y, int z) {
        return (std::int64_t(x) << 42) ^ (std::int64_t(y) << 21) ^ std::int64_t(z);
    }
    std::int64_t key(const Eigen::Vector3d& p) const {
        Eigen::Vector3i c = cell_coord(p);
        return pack(c.x(), c.y(), c.z());
    }

    const Eigen::MatrixX3d& points_;
    double cell_;
    Eigen::Vector3d min_;
    std::unordered_map<std::int64_t, std::vector<int>> cells_;
};

struct DisturbSample {
    int index = -1;
    bool fallback = false;  // candidate set was empty; nearest neighbor used
};

/// Draws the disturbance index d(i): uniform over points strictly inside
/// radius 1/bound of point i (excluding i and coincident points). When no
/// point is that close, the nearest neighbor is the hardest disturbance
/// available and is returned with the fallback flag set.
inline DisturbSample sample_disturbance(int i, const Eigen::MatrixX3d& points, double bound, Rng& rng,
                                        const SpatialGrid* grid = nullptr) {
    const int n = int(points.rows());
    if (n < 2) throw contract_error("disturbance sampling needs at least 2 points");
    if (!(bound > 0.0) || !std::isfinite(bound)) throw contract_error("hardness bound must be positive and finite");

    const Eigen::Vector3d c = points.row(i);
    const double radius = 1.0 / bound;
    constexpr double kMinDist = 1e-9;

    std::vector<int> cand;
    if (grid) {
        grid->radius_candidates(c, radius, cand);
        std::erase_if(cand, [&](int j) {
            if (j == i) return true;
            double d = (points.row(j).transpose() - c).norm();
            return !(d < radius) || d < kMinDist;
        });
        std::sort(cand.begin(), cand.end());
    } else {
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double d = (points.row(j).transpose() - c).norm();
            if (d < radius && d >= kMinDist) cand.push_back(j);
        }
    }

    if (!cand.empty()) return {cand[rng.index(cand.size())], false};

    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        double d = (points.row(j).transpose() - c).norm();
        if (d >= kMinDist && d < best_d) {
            best_d = d;
            best = j;
        }
    }
    if (best < 0) throw contract_error("all points coincide with the anchor; no disturbance possible");
    return {best, true};
}

/// One training step's worth of pairs of point-pixel pairs.
struct PairBatch {
    std::vector<int> anchor_idx;    // B point indices, view 1
    std::vector<int> positive_idx;  // B point indices, view 2 (true matches)
    std::vector<int> disturb;       // B indices d(k) != batch point k
    std::int64_t iteration = 0;
    int fallback_count = 0;
};

/// Samples B anchors without replacement from the correspondence set and
/// draws one disturbance per anchor at the scheduled hardness bound.
/// Distances are measured in view-1 coordinates.
inline PairBatch build_pair_batch(const ViewPair& views, std::int64_t iteration, int batch_size,
                                  const HardnessSchedule& schedule, Rng& rng) {
    schedule.validate();
    if (batch_size < 2) throw contract_error("batch size must be >= 2");
    if (batch_size > int(views.corr.size()))
        throw contract_error("batch size exceeds the correspondence set");

    const double bound = hardness_bound(iteration, schedule);
    SpatialGrid grid(views.v1.scene.points, 1.0 / schedule.epsilon);

    PairBatch batch;
    batch.iteration = iteration;
    std::vector<int> picks = rng.sample_without_replacement(views.corr.size(), batch_size);
    batch.anchor_idx.reserve(batch_size);
    for (int p : picks) batch.anchor_idx.push_back(views.corr[p]);
    batch.positive_idx = batch.anchor_idx;  // identity bijection on shared indices

    batch.disturb.reserve(batch_size);
    for (int k = 0; k < batch_size; ++k) {
        DisturbSample s = sample_disturbance(batch.anchor_idx[k], views.v1.scene.points, bound, rng, &grid);
        batch.disturb.push_back(s.index);
        if (s.fallback) ++batch.fallback_count;
    }
    return batch;
}

}  // namespace p4c
