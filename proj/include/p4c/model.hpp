#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "p4c/augment.hpp"
#include "p4c/common.hpp"
#include "p4c/pairing.hpp"

namespace p4c {

enum class FusionMode { Early, Late, Hybrid };

inline FusionMode fusion_from_string(const std::string& s) {
    if (s == "early") return FusionMode::Early;
    if (s == "late") return FusionMode::Late;
    if (s == "hybrid") return FusionMode::Hybrid;
    throw config_error("unknown fusion mode: " + s);
}

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::Early: return "early";
        case FusionMode::Late: return "late";
        case FusionMode::Hybrid: return "hybrid";
    }
    return "?";
}

/// The eight encoder tensors, checkpoint order. W*/b* are the 3D branch,
/// V*/bv* the 2D branch.
struct TensorSet {
    Eigen::MatrixXd W1, W2, V1, V2;
    Eigen::VectorXd b1, b2, bv1, bv2;

    template <class F>
    void visit(F&& f) {
        f("W1", true, W1); f("b1", false, b1);
        f("W2", true, W2); f("b2", false, b2);
        f("V1", true, V1); f("bv1", false, bv1);
        f("V2", true, V2); f("bv2", false, bv2);
    }
    template <class F>
    void visit(F&& f) const {
        f("W1", true, W1); f("b1", false, b1);
        f("W2", true, W2); f("b2", false, b2);
        f("V1", true, V1); f("bv1", false, bv1);
        f("V2", true, V2); f("bv2", false, bv2);
    }
    template <class F>
    static void visit3(TensorSet& a, const TensorSet& b, TensorSet& c, F&& f) {
        f(a.W1, b.W1, c.W1, true); f(a.b1, b.b1, c.b1, false);
        f(a.W2, b.W2, c.W2, true); f(a.b2, b.b2, c.b2, false);
        f(a.V1, b.V1, c.V1, true); f(a.bv1, b.bv1, c.bv1, false);
        f(a.V2, b.V2, c.V2, true); f(a.bv2, b.bv2, c.bv2, false);
    }

    /// Same shapes, all zero.
    TensorSet zeros_like() const {
        TensorSet z;
        z.W1 = Eigen::MatrixXd::Zero(W1.rows(), W1.cols());
        z.W2 = Eigen::MatrixXd::Zero(W2.rows(), W2.cols());
        z.V1 = Eigen::MatrixXd::Zero(V1.rows(), V1.cols());
        z.V2 = Eigen::MatrixXd::Zero(V2.rows(), V2.cols());
        z.b1 = Eigen::VectorXd::Zero(b1.size());
        z.b2 = Eigen::VectorXd::Zero(b2.size());
        z.bv1 = Eigen::VectorXd::Zero(bv1.size());
        z.bv2 = Eigen::VectorXd::Zero(bv2.size());
        return z;
    }
};

/// Weights of the two miniature neighborhood-aggregating encoders.
/// Layer 1 maps the 6-channel pair input to H hidden units; layer 2 maps the
/// concatenation of a row's own hidden vector and the mean hidden vector of
/// its k nearest neighbors to a unit-normalized D-dimensional feature.
struct EncoderParams {
    TensorSet t;
    FusionMode fusion = FusionMode::Hybrid;
    int hidden = 32;
    int dim = 32;
    int knn_k = 8;

    void validate() const {
        if (hidden < 4) throw config_error("hidden width must be >= 4");
        if (dim < 4) throw config_error("feature dim must be >= 4");
        if (knn_k < 1) throw config_error("knn_k must be >= 1");
        bool finite = true;
        t.visit([&](const char*, bool, const auto& m) { finite = finite && m.allFinite(); });
        if (!finite) throw contract_error("encoder parameters contain non-finite values");
    }

    /// Feature dimension seen downstream (fused width).
    int feature_dim() const { return fusion == FusionMode::Early ? dim : 2 * dim; }

    static EncoderParams init(FusionMode fusion, int hidden, int dim, int knn_k, std::uint64_t seed) {
        EncoderParams p;
        p.fusion = fusion;
        p.hidden = hidden;
        p.dim = dim;
        p.knn_k = knn_k;
        p.t.W1.resize(hidden, 6);
        p.t.b1.resize(hidden);
        p.t.W2.resize(dim, 2 * hidden);
        p.t.b2.resize(dim);
        p.t.V1.resize(hidden, 6);
        p.t.bv1.resize(hidden);
        p.t.V2.resize(dim, 2 * hidden);
        p.t.bv2.resize(dim);
        Rng rng = Rng(seed).child(0x1417);
        // uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in of the layer
        auto fill = [&](Eigen::MatrixXd& w, Eigen::VectorXd& b, int fan_in) {
            double bound = 1.0 / std::sqrt(double(fan_in));
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
            for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = rng.uniform(-bound, bound);
        };
        fill(p.t.W1, p.t.b1, 6);
        fill(p.t.W2, p.t.b2, 2 * hidden);
        fill(p.t.V1, p.t.bv1, 6);
        fill(p.t.V2, p.t.bv2, 2 * hidden);
        p.validate();
        return p;
    }
};

/// Which column blocks of the 6-channel inputs each branch may see.
/// 3D branch input: (x, y, z, r, g, b). 2D branch input: (u, v, r, g, b, depth).
/// Late fusion and the cross-modal objective mask each branch to its own
/// modality; early and hybrid feed the full 6 channels.
enum class MaskStyle { Full, LateMasked };

inline void mask_3d_geometry_only(Eigen::MatrixXd& x3) { x3.rightCols(3).setZero(); }
inline void mask_2d_color_only(Eigen::MatrixXd& x2) {
    x2.col(0).setZero();
    x2.col(1).setZero();
    x2.col(5).setZero();
}

namespace detail {

inline Eigen::MatrixXd relu(const Eigen::MatrixXd& z) { return z.cwiseMax(0.0); }

// subgradient 0 at exactly 0
inline Eigen::ArrayXXd relu_mask(const Eigen::MatrixXd& z) {
    return (z.array() > 0.0).cast<double>();
}

struct BranchCache {
    Eigen::MatrixXd own;   // 6 x B inputs
    Eigen::MatrixXi nb;    // B x k neighbor indices into the view table
    Eigen::MatrixXd zrow;  // H x B layer-1 pre-activations of own inputs
    Eigen::MatrixXd hrow;  // H x B
    Eigen::MatrixXd m;     // H x B neighbor means
    Eigen::MatrixXd u;     // D x B pre-normalization
    Eigen::VectorXd norm;  // B
    Eigen::MatrixXd f;     // D x B unit columns
};

struct BlockCache {
    bool use3 = false, use2 = false;
    int view = 0;
    BranchCache br3, br2;
    Eigen::MatrixXd ufull;  // 2D x B (fused only)
    Eigen::VectorXd nfull;
    Eigen::MatrixXd f;      // final features, columns unit
};

}  // namespace detail

/// Clean per-view context tables and their layer-1 activations.
struct ViewTables {
    Eigen::MatrixXd x3[2];  // view -> N x 6
    Eigen::MatrixXd x2[2];
};

/// A block of rows to encode: own inputs (possibly spliced) plus neighbor
/// lists into the clean tables of `view`.
struct RowBlock {
    Eigen::MatrixXd own3, own2;  // B x 6
    Eigen::MatrixXi nb3, nb2;    // B x k
    int view = 0;
    int rows() const { return int(own3.rows()); }
};

enum class BranchSel { Fused, Only3D, Only2D };

struct ModelInputs {
    ViewTables tables;
    RowBlock anchors, positives, disturbed;  // disturbed may have 0 rows
};

struct ForwardCache {
    // per view, per branch: layer-1 pre-activations and activations of the
    // clean tables (H x N), materialized only when a block referenced them
    Eigen::MatrixXd z3[2], a3[2], z2[2], a2[2];
    bool have3[2] = {false, false}, have2[2] = {false, false};
    detail::BlockCache anchors, positives, disturbed;
    BranchSel anchor_sel = BranchSel::Fused, pair_sel = BranchSel::Fused;
};

struct ForwardResult {
    Eigen::MatrixXd f_anchor, f_positive, f_disturb;  // columns are unit features
    ForwardCache cache;
};

namespace detail {

inline void ensure_tables(const ModelInputs& in, const EncoderParams& p, ForwardCache& c, int view, bool want3,
                          bool want2) {
    if (want3 && !c.have3[view]) {
        c.z3[view] = (p.t.W1 * in.tables.x3[view].transpose()).colwise() + p.t.b1;
        c.a3[view] = relu(c.z3[view]);
        c.have3[view] = true;
    }
    if (want2 && !c.have2[view]) {
        c.z2[view] = (p.t.V1 * in.tables.x2[view].transpose()).colwise() + p.t.bv1;
        c.a2[view] = relu(c.z2[view]);
        c.have2[view] = true;
    }
}

inline void branch_forward(const Eigen::MatrixXd& table_a,  // H x N activations
                           const Eigen::MatrixXd& own,      // B x 6
                           const Eigen::MatrixXi& nb,       // B x k
                           const Eigen::MatrixXd& w1, const Eigen::VectorXd& b1, const Eigen::MatrixXd& w2,
                           const Eigen::VectorXd& b2, BranchCache& out) {
    const int b = int(own.rows());
    const int k = int(nb.cols());
    const int h = int(w1.rows());
    out.own = own.transpose();
    out.nb = nb;
    out.zrow = (w1 * out.own).colwise() + b1;
    out.hrow = relu(out.zrow);
    out.m.resize(h, b);
    for (int r = 0; r < b; ++r) {
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(h);
        for (int j = 0; j < k; ++j) acc += table_a.col(nb(r, j));
        out.m.col(r) = acc / double(k);
    }
    Eigen::MatrixXd hm(2 * h, b);
    hm.topRows(h) = out.hrow;
    hm.bottomRows(h) = out.m;
    out.u = (w2 * hm).colwise() + b2;
    out.norm = out.u.colwise().norm().transpose();
    for (int r = 0; r < b; ++r)
        if (out.norm(r) < 1e-12) throw contract_error("degenerate feature: pre-normalization norm below 1e-12");
    out.f = (out.u.array().rowwise() / out.norm.transpose().array()).matrix();
}

inline void block_forward(const ModelInputs& in, const EncoderParams& p, ForwardCache& c, const RowBlock& block,
                          BranchSel sel, BlockCache& out) {
    out.view = block.view;
    out.use3 = sel != BranchSel::Only2D;
    out.use2 = (sel == BranchSel::Only2D) || (sel == BranchSel::Fused && p.fusion != FusionMode::Early);
    ensure_tables(in, p, c, block.view, out.use3, out.use2);
    if (out.use3)
        branch_forward(c.a3[block.view], block.own3, block.nb3, p.t.W1, p.t.b1, p.t.W2, p.t.b2, out.br3);
    if (out.use2)
        branch_forward(c.a2[block.view], block.own2, block.nb2, p.t.V1, p.t.bv1, p.t.V2, p.t.bv2, out.br2);

    if (out.use3 && out.use2) {
        const int b = int(block.own3.rows());
        out.ufull.resize(2 * p.dim, b);
        out.ufull.topRows(p.dim) = out.br3.f;
        out.ufull.bottomRows(p.dim) = out.br2.f;
        out.nfull = out.ufull.colwise().norm().transpose();
        out.f = (out.ufull.array().rowwise() / out.nfull.transpose().array()).matrix();
    } else {
        out.f = out.use3 ? out.br3.f : out.br2.f;
    }
}

struct TableGrads {
    Eigen::MatrixXd da3[2], da2[2];
    bool used3[2] = {false, false}, used2[2] = {false, false};
};

inline void branch_backward(const BranchCache& c, const Eigen::MatrixXd& df,  // D x B upstream
                            const Eigen::MatrixXd& w2, Eigen::MatrixXd& dW1, Eigen::VectorXd& db1,
                            Eigen::MatrixXd& dW2, Eigen::VectorXd& db2, Eigen::MatrixXd& da_table) {
    const int b = int(c.own.cols());
    const int h = int(c.hrow.rows());
    const int k = int(c.nb.cols());
    // through the L2 normalization: du = (df - f (f . df)) / ||u||
    Eigen::MatrixXd du(c.u.rows(), b);
    for (int r = 0; r < b; ++r) {
        const auto f = c.f.col(r);
        du.col(r) = (df.col(r) - f * f.dot(df.col(r))) / c.norm(r);
    }
    Eigen::MatrixXd hm(2 * h, b);
    hm.topRows(h) = c.hrow;
    hm.bottomRows(h) = c.m;
    dW2.noalias() += du * hm.transpose();
    db2 += du.rowwise().sum();
    Eigen::MatrixXd dhm = w2.transpose() * du;  // 2H x B
    Eigen::MatrixXd dhrow = (dhm.topRows(h).array() * relu_mask(c.zrow)).matrix();
    dW1.noalias() += dhrow * c.own.transpose();
    db1 += dhrow.rowwise().sum();
    const Eigen::MatrixXd dm = dhm.bottomRows(h) / double(k);
    for (int r = 0; r < b; ++r)
        for (int j = 0; j < k; ++j) da_table.col(c.nb(r, j)) += dm.col(r);
}

inline void block_backward(const BlockCache& c, const Eigen::MatrixXd& df, const EncoderParams& p, TensorSet& g,
                           TableGrads& tg) {
    Eigen::MatrixXd df3, df2;
    if (c.use3 && c.use2) {
        const int b = int(df.cols());
        Eigen::MatrixXd dufull(c.ufull.rows(), b);
        for (int r = 0; r < b; ++r) {
            const auto f = c.f.col(r);
            dufull.col(r) = (df.col(r) - f * f.dot(df.col(r))) / c.nfull(r);
        }
        df3 = dufull.topRows(p.dim);
        df2 = dufull.bottomRows(p.dim);
    } else if (c.use3) {
        df3 = df;
    } else {
        df2 = df;
    }
    if (c.use3) {
        tg.used3[c.view] = true;
        branch_backward(c.br3, df3, p.t.W2, g.W1, g.b1, g.W2, g.b2, tg.da3[c.view]);
    }
    if (c.use2) {
        tg.used2[c.view] = true;
        branch_backward(c.br2, df2, p.t.V2, g.V1, g.bv1, g.V2, g.bv2, tg.da2[c.view]);
    }
}

}  // namespace detail

/// Standalone 3D-context encoder over a clean table: each row's own input
/// plus the mean layer-1 activation of its neighbors (indices into `table`).
/// Returns D x B features with unit columns.
inline Eigen::MatrixXd encode3d(const Eigen::MatrixXd& table, const Eigen::MatrixXd& own, const Eigen::MatrixXi& nb,
                                const EncoderParams& p) {
    if (!table.allFinite() || !own.allFinite()) throw contract_error("encoder inputs must be finite");
    if (nb.minCoeff() < 0 || nb.maxCoeff() >= table.rows()) throw contract_error("neighbor index out of range");
    Eigen::MatrixXd a = detail::relu(((p.t.W1 * table.transpose()).colwise() + p.t.b1).eval());
    detail::BranchCache c;
    detail::branch_forward(a, own, nb, p.t.W1, p.t.b1, p.t.W2, p.t.b2, c);
    return c.f;
}

/// Same computation with the 2D-branch weights; neighbor indices are expected
/// to come from the image-grid metric.
inline Eigen::MatrixXd encode2d(const Eigen::MatrixXd& table, const Eigen::MatrixXd& own, const Eigen::MatrixXi& nb,
                                const EncoderParams& p) {
    if (!table.allFinite() || !own.allFinite()) throw contract_error("encoder inputs must be finite");
    if (nb.minCoeff() < 0 || nb.maxCoeff() >= table.rows()) throw contract_error("neighbor index out of range");
    Eigen::MatrixXd a = detail::relu(((p.t.V1 * table.transpose()).colwise() + p.t.bv1).eval());
    detail::BranchCache c;
    detail::branch_forward(a, own, nb, p.t.V1, p.t.bv1, p.t.V2, p.t.bv2, c);
    return c.f;
}

/// Combines branch features: early passes the 3D features through, late and
/// hybrid concatenate and renormalize.
inline Eigen::MatrixXd fuse(const Eigen::MatrixXd& f3d, const Eigen::MatrixXd& f2d, FusionMode mode) {
    if (mode == FusionMode::Early) return f3d;
    if (f3d.cols() != f2d.cols()) throw contract_error("fuse: branch batch sizes disagree");
    Eigen::MatrixXd u(f3d.rows() + f2d.rows(), f3d.cols());
    u.topRows(f3d.rows()) = f3d;
    u.bottomRows(f2d.rows()) = f2d;
    Eigen::VectorXd n = u.colwise().norm().transpose();
    for (Eigen::Index r = 0; r < n.size(); ++r)
        if (n(r) < 1e-12) throw contract_error("degenerate feature: fused norm below 1e-12");
    return (u.array().rowwise() / n.transpose().array()).matrix();
}

/// Encodes the anchor, positive, and disturbed blocks. `anchor_sel` and
/// `pair_sel` choose the branches per block (Fused for the standard
/// objectives; Only3D/Only2D for the cross-modal objective).
inline ForwardResult forward(const ModelInputs& in, const EncoderParams& p, BranchSel anchor_sel = BranchSel::Fused,
                             BranchSel pair_sel = BranchSel::Fused) {
    p.validate();
    ForwardResult r;
    r.cache.anchor_sel = anchor_sel;
    r.cache.pair_sel = pair_sel;
    detail::block_forward(in, p, r.cache, in.anchors, anchor_sel, r.cache.anchors);
    r.f_anchor = r.cache.anchors.f;
    detail::block_forward(in, p, r.cache, in.positives, pair_sel, r.cache.positives);
    r.f_positive = r.cache.positives.f;
    if (in.disturbed.rows() > 0) {
        detail::block_forward(in, p, r.cache, in.disturbed, pair_sel, r.cache.disturbed);
        r.f_disturb = r.cache.disturbed.f;
    } else {
        r.f_disturb.resize(r.f_positive.rows(), 0);
    }
    return r;
}

/// Exact reverse-mode gradients of all encoder parameters given upstream
/// feature gradients (same column layout the forward produced).
inline TensorSet backward(const ModelInputs& in, const EncoderParams& p, const ForwardCache& cache,
                          const Eigen::MatrixXd& d_anchor, const Eigen::MatrixXd& d_positive,
                          const Eigen::MatrixXd& d_disturb) {
    if (d_anchor.cols() != cache.anchors.f.cols() || d_positive.cols() != cache.positives.f.cols())
        throw contract_error("backward: upstream gradient shape mismatch");
    TensorSet g = p.t.zeros_like();
    detail::TableGrads tg;
    for (int v = 0; v < 2; ++v) {
        if (cache.have3[v]) tg.da3[v] = Eigen::MatrixXd::Zero(cache.a3[v].rows(), cache.a3[v].cols());
        if (cache.have2[v]) tg.da2[v] = Eigen::MatrixXd::Zero(cache.a2[v].rows(), cache.a2[v].cols());
    }
    detail::block_backward(cache.anchors, d_anchor, p, g, tg);
    detail::block_backward(cache.positives, d_positive, p, g, tg);
    if (d_disturb.cols() > 0) {
        if (d_disturb.cols() != cache.disturbed.f.cols())
            throw contract_error("backward: disturbed gradient shape mismatch");
        detail::block_backward(cache.disturbed, d_disturb, p, g, tg);
    }
    // context-table paths: dW1 += (dA o relu')(Z) X^T, summed over views
    for (int v = 0; v < 2; ++v) {
        if (tg.used3[v]) {
            Eigen::MatrixXd dz = (tg.da3[v].array() * detail::relu_mask(cache.z3[v])).matrix();
            g.W1.noalias() += dz * in.tables.x3[v];
            g.b1 += dz.rowwise().sum();
        }
        if (tg.used2[v]) {
            Eigen::MatrixXd dz = (tg.da2[v].array() * detail::relu_mask(cache.z2[v])).matrix();
            g.V1.noalias() += dz * in.tables.x2[v];
            g.bv1 += dz.rowwise().sum();
        }
    }
    return g;
}

namespace detail {

/// k nearest rows (excluding the query row itself) of `coords` for each query
/// in `rows`, optionally restricted by a validity mask.
inline Eigen::MatrixXi knn_indices(const Eigen::MatrixXd& coords, const std::vector<int>& rows, int k,
                                   const std::vector<char>* valid = nullptr) {
    const int n = int(coords.rows());
    Eigen::MatrixXi nb(rows.size(), k);
    std::vector<std::pair<double, int>> dist;
    dist.reserve(n);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        dist.clear();
        const Eigen::RowVectorXd q = coords.row(rows[r]);
        for (int j = 0; j < n; ++j) {
            if (j == rows[r]) continue;
            if (valid && !(*valid)[j]) continue;
            dist.emplace_back((coords.row(j) - q).squaredNorm(), j);
        }
        if (int(dist.size()) < k) throw contract_error("not enough neighbor candidates for knn");
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        for (int j = 0; j < k; ++j) nb(int(r), j) = dist[j].second;
    }
    return nb;
}

}  // namespace detail

/// Builds the 6-channel tables and row blocks for one pair batch.
/// 3D-branch table: (xyz | rgb); 2D-branch table: (u/W, v/H, rgb, z_c).
/// Disturbed rows splice the geometry channels of batch point k with the
/// color channels of point d(k), both from view 2; their neighborhoods follow
/// the geometry point.
inline ModelInputs assemble_inputs(const ViewPair& views, const PairBatch& batch, const EncoderParams& p,
                                   MaskStyle mask, bool include_disturbed) {
    ModelInputs in;
    const ViewData* vd[2] = {&views.v1, &views.v2};
    for (int v = 0; v < 2; ++v) {
        const Scene& s = vd[v]->scene;
        const int n = s.size();
        Eigen::MatrixXd x3(n, 6), x2(n, 6);
        x3.leftCols(3) = s.points;
        x3.rightCols(3) = s.colors;
        const double w = double(vd[v]->cam.width), h = double(vd[v]->cam.height);
        x2.col(0) = vd[v]->proj.col(0) / w;
        x2.col(1) = vd[v]->proj.col(1) / h;
        x2.middleCols(2, 3) = s.colors;
        x2.col(5) = vd[v]->proj.col(2);
        if (mask == MaskStyle::LateMasked) {
            mask_3d_geometry_only(x3);
            mask_2d_color_only(x2);
        }
        in.tables.x3[v] = std::move(x3);
        in.tables.x2[v] = std::move(x2);
    }

    auto fill_block = [&](RowBlock& block, const std::vector<int>& rows, int view) {
        block.view = view;
        const int b = int(rows.size());
        block.own3.resize(b, 6);
        block.own2.resize(b, 6);
        for (int r = 0; r < b; ++r) {
            block.own3.row(r) = in.tables.x3[view].row(rows[r]);
            block.own2.row(r) = in.tables.x2[view].row(rows[r]);
        }
        block.nb3 = detail::knn_indices(vd[view]->scene.points, rows, p.knn_k);
        block.nb2 = detail::knn_indices(vd[view]->proj.leftCols(2), rows, p.knn_k, &vd[view]->proj_valid);
    };

    fill_block(in.anchors, batch.anchor_idx, 0);
    fill_block(in.positives, batch.positive_idx, 1);
    if (include_disturbed) {
        fill_block(in.disturbed, batch.positive_idx, 1);
        for (int r = 0; r < int(batch.positive_idx.size()); ++r) {
            int d = batch.disturb[r];
            in.disturbed.own3.row(r).tail(3) = in.tables.x3[1].row(d).tail(3);
            in.disturbed.own2.row(r).segment(2, 3) = in.tables.x2[1].row(d).segment(2, 3);
        }
    }
    return in;
}

inline constexpr char kCheckpointMagic[9] = "P4CCKP01";

inline void save_checkpoint(std::ostream& os, const EncoderParams& p) {
    io::write_magic(os, kCheckpointMagic);
    io::write_le<std::uint32_t>(os, 1);  // version
    io::write_le<std::uint8_t>(os, std::uint8_t(p.fusion));
    io::write_le<std::uint32_t>(os, std::uint32_t(p.hidden));
    io::write_le<std::uint32_t>(os, std::uint32_t(p.dim));
    io::write_le<std::uint32_t>(os, std::uint32_t(p.knn_k));
    p.t.visit([&](const char*, bool, const auto& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) io::write_le<double>(os, m(r, c));
    });
}

inline EncoderParams load_checkpoint(std::istream& is) {
    io::expect_magic(is, kCheckpointMagic);
    auto version = io::read_le<std::uint32_t>(is);
    if (version != 1) throw contract_error("unsupported checkpoint version");
    auto fusion = io::read_le<std::uint8_t>(is);
    if (fusion > 2) throw contract_error("invalid fusion mode in checkpoint");
    auto hidden = int(io::read_le<std::uint32_t>(is));
    auto dim = int(io::read_le<std::uint32_t>(is));
    auto knn_k = int(io::read_le<std::uint32_t>(is));
    EncoderParams p = EncoderParams::init(FusionMode(fusion), hidden, dim, knn_k, 0);
    p.t.visit([&](const char*, bool, auto& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = io::read_le<double>(is);
    });
    p.validate();
    return p;
}

inline void save_checkpoint_file(const std::string& path, const EncoderParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw config_error("cannot open checkpoint for writing: " + path);
    save_checkpoint(os, p);
}

inline EncoderParams load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw config_error("cannot open checkpoint: " + path);
    return load_checkpoint(is);
}

}  // namespace p4c
