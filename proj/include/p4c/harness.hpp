#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "p4c/augment.hpp"
#include "p4c/common.hpp"
#include "p4c/config.hpp"
#include "p4c/loss.hpp"
#include "p4c/model.hpp"
#include "p4c/pairing.hpp"
#include "p4c/scene.hpp"

namespace p4c {

/// Mean pairwise cosine similarity over M unit columns: 1 = full collapse,
/// about 0 = spread.
inline double collapse_metric(const Eigen::MatrixXd& f) {
    const int m = int(f.cols());
    if (m < 2) throw contract_error("collapse_metric needs at least 2 rows");
    for (int c = 0; c < m; ++c)
        if (std::abs(f.col(c).norm() - 1.0) > 1e-6) throw contract_error("collapse_metric: non-unit feature");
    const Eigen::VectorXd s = f.rowwise().sum();
    return (s.squaredNorm() - double(m)) / (double(m) * double(m - 1));
}

struct Corpus {
    std::vector<Scene> train, test;
    SceneConfig scene_cfg;
};

inline Corpus build_corpus(const TrainConfig& cfg) {
    Corpus corpus;
    corpus.scene_cfg = cfg.scene_config();
    corpus.train.reserve(cfg.corpus_train_scenes);
    corpus.test.reserve(cfg.corpus_test_scenes);
    for (int i = 0; i < cfg.corpus_train_scenes; ++i)
        corpus.train.push_back(generate_scene(splitmix64(cfg.corpus_seed + 1000 + i), corpus.scene_cfg));
    for (int i = 0; i < cfg.corpus_test_scenes; ++i)
        corpus.test.push_back(generate_scene(splitmix64(cfg.corpus_seed + 900000 + i), corpus.scene_cfg));
    return corpus;
}

struct ProbeResult {
    std::vector<double> per_class_iou;
    std::vector<char> class_in_train;  // classes absent from the train split are flagged and excluded
    double mean_iou = 0.0;
};

/// Frozen-feature representation used downstream: the clean scene seen by the
/// default camera, encoded with the checkpoint's fusion semantics.
inline Eigen::MatrixXd encode_scene_features(const Scene& scene, const EncoderParams& params) {
    const int n = scene.size();
    Camera cam = default_camera(scene.extent);
    Eigen::MatrixXd x3(n, 6), x2(n, 6);
    x3.leftCols(3) = scene.points;
    x3.rightCols(3) = scene.colors;
    Eigen::MatrixX3d proj(n, 3);
    for (int i = 0; i < n; ++i) {
        Eigen::Vector3d pc = cam.to_camera(scene.points.row(i));
        proj.row(i) = Eigen::RowVector3d(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy, pc.z());
    }
    x2.col(0) = proj.col(0) / double(cam.width);
    x2.col(1) = proj.col(1) / double(cam.height);
    x2.middleCols(2, 3) = scene.colors;
    x2.col(5) = proj.col(2);
    if (params.fusion == FusionMode::Late) {
        mask_3d_geometry_only(x3);
        mask_2d_color_only(x2);
    }

    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    Eigen::MatrixXi nb3 = detail::knn_indices(scene.points, rows, params.knn_k);
    Eigen::MatrixXd f3 = encode3d(x3, x3, nb3, params);
    if (params.fusion == FusionMode::Early) return f3;
    Eigen::MatrixXi nb2 = detail::knn_indices(proj.leftCols(2), rows, params.knn_k);
    Eigen::MatrixXd f2 = encode2d(x2, x2, nb2, params);
    return fuse(f3, f2, params.fusion);
}

/// Multinomial logistic regression on frozen features: fixed budget of
/// full-batch gradient descent steps, then per-class IoU on the test rows.
inline ProbeResult linear_probe(const Eigen::MatrixXd& train_f, const std::vector<std::uint32_t>& train_y,
                                const Eigen::MatrixXd& test_f, const std::vector<std::uint32_t>& test_y,
                                int num_classes, int steps, double lr) {
    const int d = int(train_f.rows());
    const int ntr = int(train_f.cols());
    const int nte = int(test_f.cols());
    if (ntr == 0 || nte == 0) throw contract_error("linear_probe: empty split");

    ProbeResult res;
    res.class_in_train.assign(num_classes, 0);
    for (auto y : train_y) res.class_in_train[y] = 1;

    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(num_classes, d);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(num_classes);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(num_classes, ntr);
    for (int i = 0; i < ntr; ++i) onehot(train_y[i], i) = 1.0;

    for (int s = 0; s < steps; ++s) {
        Eigen::MatrixXd logits = (w * train_f).colwise() + b;  // C x Ntr
        Eigen::RowVectorXd mx = logits.colwise().maxCoeff();
        Eigen::MatrixXd p = (logits.rowwise() - mx).array().exp().matrix();
        Eigen::RowVectorXd z = p.colwise().sum();
        p = (p.array().rowwise() / z.array()).matrix();
        Eigen::MatrixXd g = (p - onehot) / double(ntr);
        w.noalias() -= lr * (g * train_f.transpose());
        b -= lr * g.rowwise().sum();
    }

    std::vector<std::int64_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    Eigen::MatrixXd logits = (w * test_f).colwise() + b;
    for (int i = 0; i < nte; ++i) {
        int pred = 0;
        logits.col(i).maxCoeff(&pred);
        int truth = int(test_y[i]);
        if (pred == truth) {
            ++tp[truth];
        } else {
            ++fp[pred];
            ++fn[truth];
        }
    }
    res.per_class_iou.assign(num_classes, 0.0);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        double denom = double(tp[c] + fp[c] + fn[c]);
        res.per_class_iou[c] = denom > 0 ? double(tp[c]) / denom : 0.0;
        if (res.class_in_train[c]) {
            sum += res.per_class_iou[c];
            ++counted;
        }
    }
    res.mean_iou = counted > 0 ? sum / counted : 0.0;
    return res;
}

/// Loss curve, schedule curve, collapse diagnostics, probe scores, and the
/// configuration fingerprint for one run.
struct RunReport {
    std::vector<double> loss_curve, bound_curve, lr_curve, collapse_curve;
    std::vector<int> fallback_curve;
    std::vector<std::pair<std::int64_t, double>> collapse_checkpoints;
    double final_collapse = 0.0;
    std::int64_t fallback_total = 0;
    ProbeResult probe, probe_random;
    double wall_time_sec = 0.0;  // informational; never serialized
    std::string fingerprint;
};

struct PretrainResult {
    EncoderParams params;
    RunReport report;
};

namespace detail {

inline MaskStyle mask_style(const TrainConfig& cfg) {
    if (cfg.objective == Objective::CrossModal || cfg.fusion == FusionMode::Late) return MaskStyle::LateMasked;
    return MaskStyle::Full;
}

struct StepOutcome {
    double loss = 0.0;
    TensorSet grads;
    Eigen::MatrixXd f_anchor;  // for the cheap per-iteration collapse signal
};

/// Forward + loss + backward for one assembled batch under the configured
/// objective. Cross-modal anchors use only the 3D branch and its pairs only
/// the 2D branch; separate-then-fuse sums two single-branch losses.
inline StepOutcome run_step(const ModelInputs& inputs, const EncoderParams& params, const TrainConfig& cfg) {
    StepOutcome out;
    if (cfg.objective == Objective::CrossModal) {
        ForwardResult r = forward(inputs, params, BranchSel::Only3D, BranchSel::Only2D);
        LossResult l = pair_info_nce(r.f_anchor, r.f_positive, r.f_disturb, cfg.loss);
        out.loss = l.loss;
        out.grads = backward(inputs, params, r.cache, l.d_anchor, l.d_positive, l.d_disturb);
        out.f_anchor = r.f_anchor;
        return out;
    }
    const bool separate = cfg.train_branches == TrainBranches::SeparateThenFuse && cfg.fusion != FusionMode::Early;
    if (!separate) {
        ForwardResult r = forward(inputs, params, BranchSel::Fused, BranchSel::Fused);
        LossResult l = pair_info_nce(r.f_anchor, r.f_positive, r.f_disturb, cfg.loss);
        out.loss = l.loss;
        out.grads = backward(inputs, params, r.cache, l.d_anchor, l.d_positive, l.d_disturb);
        out.f_anchor = r.f_anchor;
        return out;
    }
    ForwardResult r3 = forward(inputs, params, BranchSel::Only3D, BranchSel::Only3D);
    LossResult l3 = pair_info_nce(r3.f_anchor, r3.f_positive, r3.f_disturb, cfg.loss);
    TensorSet g3 = backward(inputs, params, r3.cache, l3.d_anchor, l3.d_positive, l3.d_disturb);
    ForwardResult r2 = forward(inputs, params, BranchSel::Only2D, BranchSel::Only2D);
    LossResult l2 = pair_info_nce(r2.f_anchor, r2.f_positive, r2.f_disturb, cfg.loss);
    TensorSet g2 = backward(inputs, params, r2.cache, l2.d_anchor, l2.d_positive, l2.d_disturb);
    out.loss = l3.loss + l2.loss;
    TensorSet::visit3(g3, g2, g3, [](auto& a, const auto& b, auto&, bool) { a += b; });
    out.grads = std::move(g3);
    out.f_anchor = r3.f_anchor;
    return out;
}

/// Features of a fixed deterministic point sample, for the checkpointed
/// collapse metric.
inline double checkpoint_collapse(const Corpus& corpus, const EncoderParams& params, std::uint64_t seed) {
    const Scene& scene = corpus.train.front();
    Eigen::MatrixXd f = encode_scene_features(scene, params);
    const int m = std::min(512, int(f.cols()));
    Rng rng = Rng(seed).child(0xc0a);
    std::vector<int> pick = rng.sample_without_replacement(f.cols(), m);
    Eigen::MatrixXd sub(f.rows(), m);
    for (int i = 0; i < m; ++i) sub.col(i) = f.col(pick[i]);
    return collapse_metric(sub);
}

}  // namespace detail

/// Per-class splits of corpus features for the probe.
struct ProbeData {
    Eigen::MatrixXd train_f, test_f;
    std::vector<std::uint32_t> train_y, test_y;
};

/// Encodes the corpus with frozen params. Train rows are a deterministic
/// per-scene subsample (fair across methods); test rows are every point.
inline ProbeData build_probe_data(const Corpus& corpus, const EncoderParams& params, int samples_per_scene) {
    ProbeData data;
    const int dim = params.feature_dim();
    std::vector<Eigen::MatrixXd> train_blocks;
    for (std::size_t s = 0; s < corpus.train.size(); ++s) {
        const Scene& scene = corpus.train[s];
        Eigen::MatrixXd f = encode_scene_features(scene, params);
        std::vector<int> rows;
        if (samples_per_scene > 0 && samples_per_scene < scene.size()) {
            Rng rng = Rng(0xbeef + s).child(0);
            rows = rng.sample_without_replacement(scene.size(), samples_per_scene);
            std::sort(rows.begin(), rows.end());
        } else {
            rows.resize(scene.size());
            std::iota(rows.begin(), rows.end(), 0);
        }
        Eigen::MatrixXd block(dim, rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            block.col(i) = f.col(rows[i]);
            data.train_y.push_back(scene.labels[rows[i]]);
        }
        train_blocks.push_back(std::move(block));
    }
    Eigen::Index total = 0;
    for (const auto& b : train_blocks) total += b.cols();
    data.train_f.resize(dim, total);
    Eigen::Index at = 0;
    for (const auto& b : train_blocks) {
        data.train_f.middleCols(at, b.cols()) = b;
        at += b.cols();
    }

    Eigen::Index ntest = 0;
    for (const auto& s : corpus.test) ntest += s.size();
    data.test_f.resize(dim, ntest);
    at = 0;
    for (const auto& scene : corpus.test) {
        data.test_f.middleCols(at, scene.size()) = encode_scene_features(scene, params);
        for (int i = 0; i < scene.size(); ++i) data.test_y.push_back(scene.labels[i]);
        at += scene.size();
    }
    return data;
}

inline ProbeResult probe_params(const Corpus& corpus, const EncoderParams& params, int steps, double lr,
                                int samples_per_scene) {
    ProbeData data = build_probe_data(corpus, params, samples_per_scene);
    int num_classes = int(corpus.train.front().num_classes);
    return linear_probe(data.train_f, data.train_y, data.test_f, data.test_y, num_classes, steps, lr);
}

inline ProbeResult probe_params(const Corpus& corpus, const EncoderParams& params, const TrainConfig& cfg) {
    return probe_params(corpus, params, cfg.probe_steps, cfg.probe_lr, cfg.probe_samples_per_scene);
}

/// Full pretraining run: deterministic in (config, seed). Emits the trained
/// params plus the report, including the random-init probe control.
inline PretrainResult pretrain(const TrainConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    Corpus corpus = build_corpus(cfg);
    FusionMode fusion = cfg.objective == Objective::CrossModal ? FusionMode::Late : cfg.fusion;
    EncoderParams params = EncoderParams::init(fusion, cfg.model_hidden, cfg.model_dim, cfg.model_knn_k,
                                               splitmix64(cfg.seed ^ 0x5eed));
    const EncoderParams init_params = params;

    OptState opt = OptState::init(params);
    opt.base_lr = cfg.opt_base_lr;
    opt.momentum = cfg.opt_momentum;
    opt.weight_decay = cfg.opt_weight_decay;
    opt.power = cfg.opt_power;
    opt.total_iters = cfg.lr_total_iters();

    const HardnessSchedule schedule = cfg.effective_schedule();
    const bool with_disturbed = cfg.objective == Objective::P4Contrast;
    const MaskStyle mask = detail::mask_style(cfg);

    RunReport report;
    report.fingerprint = cfg.fingerprint();
    const std::int64_t checkpoint_every = std::max<std::int64_t>(1, cfg.iterations / 8);

    Rng master(cfg.seed);
    for (std::int64_t k = 0; k < cfg.iterations; ++k) {
        const Scene& scene = corpus.train[std::size_t(k) % corpus.train.size()];
        const std::uint64_t batch_seed = master.child(std::uint64_t(k)).seed();
        ViewPair views = make_views(scene, cfg.aug, splitmix64(batch_seed ^ 0x11e35));
        Rng batch_rng = Rng(batch_seed).child(0xba7c4);
        PairBatch batch = build_pair_batch(views, k, cfg.batch_size, schedule, batch_rng);
        ModelInputs inputs = assemble_inputs(views, batch, params, mask, with_disturbed);

        detail::StepOutcome step = detail::run_step(inputs, params, cfg);
        if (!std::isfinite(step.loss))
            throw std::runtime_error("non-finite loss at iteration " + std::to_string(k) + ", batch seed " +
                                     std::to_string(batch_seed));
        sgd_step(params, step.grads, opt, k);

        report.loss_curve.push_back(step.loss);
        report.bound_curve.push_back(hardness_bound(k, schedule));
        report.lr_curve.push_back(poly_lr(k, opt));
        report.collapse_curve.push_back(collapse_metric(step.f_anchor));
        report.fallback_curve.push_back(batch.fallback_count);
        report.fallback_total += batch.fallback_count;

        if ((k + 1) % checkpoint_every == 0 || k + 1 == cfg.iterations)
            report.collapse_checkpoints.emplace_back(k + 1, detail::checkpoint_collapse(corpus, params, cfg.seed));
    }
    report.final_collapse = cfg.iterations > 0 ? report.collapse_checkpoints.back().second
                                               : detail::checkpoint_collapse(corpus, params, cfg.seed);

    report.probe = probe_params(corpus, params, cfg);
    report.probe_random = probe_params(corpus, init_params, cfg);

    report.wall_time_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(params), std::move(report)};
}

/// RFC-4180 quoting: quote when the field contains a comma, quote, or newline.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

/// Per-iteration metrics, fixed column order.
inline void write_metrics_csv(std::ostream& os, const RunReport& r) {
    os << "iter,loss,lr,hardness_bound,collapse,fallbacks\n";
    char buf[256];
    for (std::size_t k = 0; k < r.loss_curve.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%d\n", k, r.loss_curve[k], r.lr_curve[k],
                      r.bound_curve[k], r.collapse_curve[k], r.fallback_curve[k]);
        os << buf;
    }
}

namespace detail {

/// Central finite differences through forward + PairInfoNCE for one random
/// small instance. Instances whose layer-1 pre-activations sit within 1e-6 of
/// a relu kink are redrawn (the subgradient convention makes them
/// non-differentiable points).
struct GradCheckInstance {
    ModelInputs inputs;
    EncoderParams params;
    LossConfig loss_cfg;
    BranchSel anchor_sel = BranchSel::Fused, pair_sel = BranchSel::Fused;
    bool with_disturbed = true;
};

inline double gradcheck_loss(const GradCheckInstance& inst, const EncoderParams& params) {
    ForwardResult r = forward(inst.inputs, params, inst.anchor_sel, inst.pair_sel);
    return pair_info_nce(r.f_anchor, r.f_positive, r.f_disturb, inst.loss_cfg).loss;
}

inline double min_kink_distance(const GradCheckInstance& inst, const EncoderParams& params) {
    ForwardResult r = forward(inst.inputs, params, inst.anchor_sel, inst.pair_sel);
    double m = std::numeric_limits<double>::infinity();
    for (int v = 0; v < 2; ++v) {
        if (r.cache.have3[v]) m = std::min(m, r.cache.z3[v].cwiseAbs().minCoeff());
        if (r.cache.have2[v]) m = std::min(m, r.cache.z2[v].cwiseAbs().minCoeff());
    }
    for (const auto* blk : {&r.cache.anchors, &r.cache.positives, &r.cache.disturbed}) {
        if (blk->use3 && blk->br3.zrow.size() > 0) m = std::min(m, blk->br3.zrow.cwiseAbs().minCoeff());
        if (blk->use2 && blk->br2.zrow.size() > 0) m = std::min(m, blk->br2.zrow.cwiseAbs().minCoeff());
    }
    return m;
}

inline GradCheckInstance make_gradcheck_instance(FusionMode fusion, bool include_positive, Objective objective,
                                                 std::uint64_t seed) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        std::uint64_t s = splitmix64(seed + attempt * 7919);
        SceneConfig sc;
        sc.primitives = 2;
        sc.points_per_primitive = 24;
        sc.extent = 1.0;
        sc.class_table = make_class_table(s, sc.primitives);
        Scene scene = generate_scene(s, sc);

        AugmentConfig aug;
        aug.sigma_xyz = 0.02;
        aug.sigma_rgb = 0.05;
        ViewPair views = make_views(scene, aug, splitmix64(s ^ 0xf00d));

        HardnessSchedule sched{2.0, 0.0, 40.0};
        Rng rng = Rng(s).child(77);
        PairBatch batch = build_pair_batch(views, 0, 4, sched, rng);

        GradCheckInstance inst;
        inst.params = EncoderParams::init(fusion, 8, 8, 3, splitmix64(s ^ 0x9a9a));
        inst.loss_cfg.tau = 0.4;
        inst.loss_cfg.include_positive_in_denominator = include_positive;
        if (objective == Objective::CrossModal) {
            inst.anchor_sel = BranchSel::Only3D;
            inst.pair_sel = BranchSel::Only2D;
            inst.with_disturbed = false;
        } else {
            inst.with_disturbed = objective == Objective::P4Contrast;
        }
        MaskStyle mask = (objective == Objective::CrossModal || fusion == FusionMode::Late) ? MaskStyle::LateMasked
                                                                                            : MaskStyle::Full;
        inst.inputs = assemble_inputs(views, batch, inst.params, mask, inst.with_disturbed);
        if (min_kink_distance(inst, inst.params) > 1e-6) return inst;
    }
}

}  // namespace detail

struct GradCheckResult {
    double max_rel_err = 0.0;
    int instances = 0;
};

/// Compares analytic parameter gradients of forward + PairInfoNCE against
/// central finite differences (delta = 1e-6). Relative error uses
/// |ga - gf| / max(1, |gf|).
inline GradCheckResult gradient_check(int trials, FusionMode fusion, bool include_positive,
                                      Objective objective = Objective::P4Contrast, std::uint64_t seed = 12345) {
    constexpr double kDelta = 1e-6;
    GradCheckResult result;
    for (int trial = 0; trial < trials; ++trial) {
        detail::GradCheckInstance inst =
            detail::make_gradcheck_instance(fusion, include_positive, objective, splitmix64(seed + trial));
        ForwardResult r = forward(inst.inputs, inst.params, inst.anchor_sel, inst.pair_sel);
        LossResult l = pair_info_nce(r.f_anchor, r.f_positive, r.f_disturb, inst.loss_cfg);
        TensorSet analytic = backward(inst.inputs, inst.params, r.cache, l.d_anchor, l.d_positive, l.d_disturb);

        EncoderParams probe = inst.params;
        double worst = 0.0;
        auto check_tensor = [&](auto& theta, const auto& ga) {
            for (Eigen::Index i = 0; i < theta.size(); ++i) {
                const double save = theta(i);
                theta(i) = save + kDelta;
                const double up = detail::gradcheck_loss(inst, probe);
                theta(i) = save - kDelta;
                const double dn = detail::gradcheck_loss(inst, probe);
                theta(i) = save;
                const double gf = (up - dn) / (2.0 * kDelta);
                worst = std::max(worst, std::abs(ga(i) - gf) / std::max(1.0, std::abs(gf)));
            }
        };
        check_tensor(probe.t.W1, analytic.W1);
        check_tensor(probe.t.b1, analytic.b1);
        check_tensor(probe.t.W2, analytic.W2);
        check_tensor(probe.t.b2, analytic.b2);
        check_tensor(probe.t.V1, analytic.V1);
        check_tensor(probe.t.bv1, analytic.bv1);
        check_tensor(probe.t.V2, analytic.V2);
        check_tensor(probe.t.bv2, analytic.bv2);
        result.max_rel_err = std::max(result.max_rel_err, worst);
        ++result.instances;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Probe with encoder fine-tuning

struct FinetuneOptions {
    int steps = 100;
    double head_lr = 0.1;
    double encoder_lr = 0.02;
    int samples_per_scene = 256;
};

namespace detail {

inline std::vector<int> probe_row_sample(const Scene& scene, int samples_per_scene, std::size_t scene_index) {
    std::vector<int> rows;
    if (samples_per_scene > 0 && samples_per_scene < scene.size()) {
        Rng rng = Rng(0xbeef + scene_index).child(0);
        rows = rng.sample_without_replacement(scene.size(), samples_per_scene);
        std::sort(rows.begin(), rows.end());
    } else {
        rows.resize(scene.size());
        std::iota(rows.begin(), rows.end(), 0);
    }
    return rows;
}

/// Single-view ModelInputs for supervised passes over clean-scene rows.
inline ModelInputs scene_inputs(const Scene& scene, const std::vector<int>& rows, const EncoderParams& params) {
    ModelInputs in;
    Camera cam = default_camera(scene.extent);
    const int n = scene.size();
    Eigen::MatrixXd x3(n, 6), x2(n, 6);
    x3.leftCols(3) = scene.points;
    x3.rightCols(3) = scene.colors;
    Eigen::MatrixX3d proj(n, 3);
    for (int i = 0; i < n; ++i) {
        Eigen::Vector3d pc = cam.to_camera(scene.points.row(i));
        proj.row(i) = Eigen::RowVector3d(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy, pc.z());
    }
    x2.col(0) = proj.col(0) / double(cam.width);
    x2.col(1) = proj.col(1) / double(cam.height);
    x2.middleCols(2, 3) = scene.colors;
    x2.col(5) = proj.col(2);
    if (params.fusion == FusionMode::Late) {
        mask_3d_geometry_only(x3);
        mask_2d_color_only(x2);
    }
    in.tables.x3[0] = x3;
    in.tables.x2[0] = x2;
    in.tables.x3[1] = Eigen::MatrixXd();
    in.tables.x2[1] = Eigen::MatrixXd();

    RowBlock block;
    block.view = 0;
    block.own3.resize(rows.size(), 6);
    block.own2.resize(rows.size(), 6);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        block.own3.row(Eigen::Index(r)) = x3.row(rows[r]);
        block.own2.row(Eigen::Index(r)) = x2.row(rows[r]);
    }
    block.nb3 = knn_indices(scene.points, rows, params.knn_k);
    block.nb2 = knn_indices(proj.leftCols(2), rows, params.knn_k);
    in.anchors = block;
    in.positives = block;  // forward always encodes both; the positive gradient stays zero
    return in;
}

}  // namespace detail

/// Downstream evaluation that also adapts the encoder: joint gradient descent
/// on a softmax head and the encoder weights over the train split, then IoU
/// on the test split. The frozen-feature probe is the primary metric; this is
/// the small-scale analog of full supervised fine-tuning.
inline ProbeResult finetune_probe(const Corpus& corpus, EncoderParams params, const FinetuneOptions& opt) {
    const int num_classes = int(corpus.train.front().num_classes);
    const int dim = params.feature_dim();
    const BranchSel sel = BranchSel::Fused;

    struct SceneBatch {
        ModelInputs inputs;
        Eigen::MatrixXd onehot;
        std::vector<std::uint32_t> labels;
    };
    std::vector<SceneBatch> batches;
    std::vector<char> class_in_train(num_classes, 0);
    for (std::size_t s = 0; s < corpus.train.size(); ++s) {
        const Scene& scene = corpus.train[s];
        SceneBatch sb;
        std::vector<int> rows = detail::probe_row_sample(scene, opt.samples_per_scene, s);
        sb.inputs = detail::scene_inputs(scene, rows, params);
        sb.onehot = Eigen::MatrixXd::Zero(num_classes, rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            sb.onehot(scene.labels[rows[r]], Eigen::Index(r)) = 1.0;
            sb.labels.push_back(scene.labels[rows[r]]);
            class_in_train[scene.labels[rows[r]]] = 1;
        }
        batches.push_back(std::move(sb));
    }

    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(num_classes, dim);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(num_classes);
    for (int step = 0; step < opt.steps; ++step) {
        Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(num_classes, dim);
        Eigen::VectorXd db = Eigen::VectorXd::Zero(num_classes);
        TensorSet enc_g = params.t.zeros_like();
        std::int64_t total_rows = 0;
        for (const auto& sb : batches) total_rows += sb.onehot.cols();
        for (const auto& sb : batches) {
            ForwardResult r = forward(sb.inputs, params, sel, sel);
            const Eigen::MatrixXd& f = r.f_anchor;
            Eigen::MatrixXd logits = (w * f).colwise() + b;
            Eigen::RowVectorXd mx = logits.colwise().maxCoeff();
            Eigen::MatrixXd p = (logits.rowwise() - mx).array().exp().matrix();
            Eigen::RowVectorXd z = p.colwise().sum();
            p = (p.array().rowwise() / z.array()).matrix();
            Eigen::MatrixXd g = (p - sb.onehot) / double(total_rows);
            dw.noalias() += g * f.transpose();
            db += g.rowwise().sum();
            Eigen::MatrixXd df = w.transpose() * g;
            Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(df.rows(), df.cols());
            TensorSet gs = backward(sb.inputs, params, r.cache, df, zero, Eigen::MatrixXd(df.rows(), 0));
            TensorSet::visit3(enc_g, gs, enc_g, [](auto& a, const auto& gpart, auto&, bool) { a += gpart; });
        }
        w -= opt.head_lr * dw;
        b -= opt.head_lr * db;
        TensorSet::visit3(params.t, enc_g, params.t, [&](auto& theta, const auto& g, auto&, bool) {
            theta -= opt.encoder_lr * g;
        });
    }

    ProbeResult res;
    res.class_in_train = class_in_train;
    std::vector<std::int64_t> tp(num_classes, 0), fpos(num_classes, 0), fneg(num_classes, 0);
    for (const auto& scene : corpus.test) {
        Eigen::MatrixXd f = encode_scene_features(scene, params);
        Eigen::MatrixXd logits = (w * f).colwise() + b;
        for (int i = 0; i < scene.size(); ++i) {
            int pred = 0;
            logits.col(i).maxCoeff(&pred);
            int truth = int(scene.labels[i]);
            if (pred == truth) ++tp[truth];
            else {
                ++fpos[pred];
                ++fneg[truth];
            }
        }
    }
    res.per_class_iou.assign(num_classes, 0.0);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        double denom = double(tp[c] + fpos[c] + fneg[c]);
        res.per_class_iou[c] = denom > 0 ? double(tp[c]) / denom : 0.0;
        if (res.class_in_train[c]) {
            sum += res.per_class_iou[c];
            ++counted;
        }
    }
    res.mean_iou = counted > 0 ? sum / counted : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// Corpus files

inline void save_corpus(const std::string& dir, const Corpus& corpus) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    char name[64];
    for (std::size_t i = 0; i < corpus.train.size(); ++i) {
        std::snprintf(name, sizeof(name), "train_%03zu.p4cscn", i);
        save_scene_file((fs::path(dir) / name).string(), corpus.train[i]);
    }
    for (std::size_t i = 0; i < corpus.test.size(); ++i) {
        std::snprintf(name, sizeof(name), "test_%03zu.p4cscn", i);
        save_scene_file((fs::path(dir) / name).string(), corpus.test[i]);
    }
}

inline Corpus load_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    Corpus corpus;
    std::vector<fs::path> train_files, test_files;
    if (!fs::is_directory(dir)) throw config_error("corpus path is not a directory: " + dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.starts_with("train_") && name.ends_with(".p4cscn")) train_files.push_back(entry.path());
        if (name.starts_with("test_") && name.ends_with(".p4cscn")) test_files.push_back(entry.path());
    }
    std::sort(train_files.begin(), train_files.end());
    std::sort(test_files.begin(), test_files.end());
    for (const auto& p : train_files) corpus.train.push_back(load_scene_file(p.string()));
    for (const auto& p : test_files) corpus.test.push_back(load_scene_file(p.string()));
    if (corpus.train.empty() || corpus.test.empty())
        throw config_error("corpus directory needs train_*.p4cscn and test_*.p4cscn files: " + dir);
    const Scene& first = corpus.train.front();
    corpus.scene_cfg.primitives = int(first.num_classes) / 2;
    corpus.scene_cfg.points_per_primitive = first.size() / std::max(1, corpus.scene_cfg.primitives);
    corpus.scene_cfg.extent = first.extent;
    corpus.scene_cfg.class_table.resize(corpus.scene_cfg.primitives);
    return corpus;
}

// ---------------------------------------------------------------------------
// Ablation runner

struct AblationCell {
    std::string descriptor;                       // swept key=value pairs, ';'-joined
    std::map<std::string, std::string> overrides; // full key set for this cell
};

/// Expands a grid file (config text whose values may be '|'-separated lists)
/// into the cross product of cells, ordered by descriptor.
inline std::vector<AblationCell> expand_grid(const std::string& grid_text) {
    auto kv = parse_config_text(grid_text);
    std::vector<std::pair<std::string, std::vector<std::string>>> swept;
    std::map<std::string, std::string> fixed;
    for (const auto& [key, val] : kv) {
        if (val.find('|') == std::string::npos) {
            fixed[key] = val;
            continue;
        }
        std::vector<std::string> options;
        std::size_t start = 0;
        while (start <= val.size()) {
            std::size_t end = val.find('|', start);
            if (end == std::string::npos) end = val.size();
            std::string tok = val.substr(start, end - start);
            std::size_t a = tok.find_first_not_of(" \t");
            std::size_t b = tok.find_last_not_of(" \t");
            options.push_back(a == std::string::npos ? std::string() : tok.substr(a, b - a + 1));
            start = end + 1;
        }
        if (options.empty()) throw config_error("grid key has no options: " + key);
        swept.emplace_back(key, options);
    }
    if (swept.empty()) {
        AblationCell cell;
        cell.descriptor = "base";
        cell.overrides = fixed;
        return {cell};
    }
    std::vector<AblationCell> cells;
    std::vector<std::size_t> idx(swept.size(), 0);
    while (true) {
        AblationCell cell;
        cell.overrides = fixed;
        std::string desc;
        for (std::size_t i = 0; i < swept.size(); ++i) {
            cell.overrides[swept[i].first] = swept[i].second[idx[i]];
            if (!desc.empty()) desc += ";";
            desc += swept[i].first + "=" + swept[i].second[idx[i]];
        }
        cell.descriptor = desc;
        cells.push_back(std::move(cell));
        std::size_t pos = swept.size();
        while (pos > 0) {
            --pos;
            if (++idx[pos] < swept[pos].second.size()) break;
            idx[pos] = 0;
            if (pos == 0) {
                std::sort(cells.begin(), cells.end(),
                          [](const AblationCell& a, const AblationCell& b) { return a.descriptor < b.descriptor; });
                return cells;
            }
        }
    }
}

struct AblationRow {
    std::string cell;
    std::uint64_t seed = 0;
    bool ok = false;
    double miou = 0.0, collapse = 0.0;
    std::int64_t fallbacks = 0;
    std::string error;
};

/// One pretrain+probe per (cell, seed). Failures become error rows; the run
/// continues. Rows come out ordered by (cell, seed).
inline std::vector<AblationRow> ablate(const std::string& grid_text, int seeds) {
    if (seeds < 1) throw config_error("ablate needs at least 1 seed");
    std::vector<AblationCell> cells = expand_grid(grid_text);
    if (cells.empty()) throw config_error("ablation grid is empty");
    std::vector<AblationRow> rows;
    for (const auto& cell : cells) {
        for (int s = 0; s < seeds; ++s) {
            AblationRow row;
            row.cell = cell.descriptor;
            row.seed = std::uint64_t(s + 1);
            try {
                auto overrides = cell.overrides;
                overrides["seed"] = std::to_string(row.seed);
                TrainConfig cfg = TrainConfig::from_map(overrides);
                PretrainResult res = pretrain(cfg);
                row.ok = true;
                row.miou = res.report.probe.mean_iou;
                row.collapse = res.report.final_collapse;
                row.fallbacks = res.report.fallback_total;
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "cell,seed,miou,collapse,fallbacks,status\n";
    char buf[128];
    for (const auto& r : rows) {
        os << csv_field(r.cell) << "," << r.seed << ",";
        if (r.ok) {
            std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%lld,ok\n", r.miou, r.collapse, (long long)r.fallbacks);
            os << buf;
        } else {
            os << ",,," << csv_field("error: " + r.error) << "\n";
        }
    }
}

}  // namespace p4c
