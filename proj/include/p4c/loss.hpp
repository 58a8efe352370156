#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "p4c/common.hpp"
#include "p4c/model.hpp"

namespace p4c {

struct LossConfig {
    double tau = 0.4;
    // The printed loss keeps only the two negative sums in the denominator;
    // the standard InfoNCE form adds the positive term. Both are supported.
    bool include_positive_in_denominator = false;

    void validate() const {
        if (!(tau > 0.0)) throw config_error("loss temperature must be positive");
    }
};

struct LossResult {
    double loss = 0.0;
    Eigen::MatrixXd d_anchor, d_positive, d_disturb;  // dL/dF, same layouts as inputs
};

namespace detail {

inline void check_unit_columns(const Eigen::MatrixXd& f, const char* what) {
    for (Eigen::Index c = 0; c < f.cols(); ++c)
        if (std::abs(f.col(c).norm() - 1.0) > 1e-6)
            throw contract_error(std::string("pair_info_nce: non-unit feature column in ") + what);
}

}  // namespace detail

/// Softmax-contrastive loss over pairs of point-pixel pairs. Anchor i scores
/// its positive against the other positives (undisturbed negatives) and the
/// shared disturbed block (which keeps the k = i entry). Features are columns;
/// the disturbed block may be empty. Log-sum-exp is max-stabilized and the
/// returned gradients are exact for the configured denominator variant.
inline LossResult pair_info_nce(const Eigen::MatrixXd& f_anchor, const Eigen::MatrixXd& f_positive,
                                const Eigen::MatrixXd& f_disturb, const LossConfig& cfg) {
    cfg.validate();
    const int b = int(f_anchor.cols());
    const int nd = int(f_disturb.cols());
    if (b < 1) throw contract_error("pair_info_nce: empty batch");
    if (f_positive.cols() != b) throw contract_error("pair_info_nce: anchor/positive batch sizes disagree");
    if (b < 2 && nd == 0 && !cfg.include_positive_in_denominator)
        throw contract_error("pair_info_nce: denominator would be empty");
    detail::check_unit_columns(f_anchor, "anchors");
    detail::check_unit_columns(f_positive, "positives");
    if (nd > 0) detail::check_unit_columns(f_disturb, "disturbed negatives");

    const double inv_tau = 1.0 / cfg.tau;
    const Eigen::MatrixXd s = f_anchor.transpose() * f_positive;  // B x B
    const Eigen::MatrixXd t = nd > 0 ? (f_anchor.transpose() * f_disturb).eval() : Eigen::MatrixXd(b, 0);

    LossResult out;
    out.d_anchor = Eigen::MatrixXd::Zero(f_anchor.rows(), b);
    out.d_positive = Eigen::MatrixXd::Zero(f_positive.rows(), b);
    out.d_disturb = Eigen::MatrixXd::Zero(f_positive.rows(), nd);

    for (int i = 0; i < b; ++i) {
        // denominator terms in units of 1/tau
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < b; ++j)
            if (j != i) m = std::max(m, s(i, j) * inv_tau);
        for (int k = 0; k < nd; ++k) m = std::max(m, t(i, k) * inv_tau);
        if (cfg.include_positive_in_denominator) m = std::max(m, s(i, i) * inv_tau);

        double sum = 0.0;
        for (int j = 0; j < b; ++j)
            if (j != i) sum += std::exp(s(i, j) * inv_tau - m);
        for (int k = 0; k < nd; ++k) sum += std::exp(t(i, k) * inv_tau - m);
        if (cfg.include_positive_in_denominator) sum += std::exp(s(i, i) * inv_tau - m);
        const double log_denom = m + std::log(sum);

        out.loss += -s(i, i) * inv_tau + log_denom;

        // gradient weights: softmax over the denominator terms
        out.d_anchor.col(i) -= inv_tau * f_positive.col(i);
        out.d_positive.col(i) -= inv_tau * f_anchor.col(i);
        for (int j = 0; j < b; ++j) {
            if (j == i && !cfg.include_positive_in_denominator) continue;
            const double w = std::exp(s(i, j) * inv_tau - log_denom) * inv_tau;
            out.d_anchor.col(i) += w * f_positive.col(j);
            out.d_positive.col(j) += w * f_anchor.col(i);
        }
        for (int k = 0; k < nd; ++k) {
            const double w = std::exp(t(i, k) * inv_tau - log_denom) * inv_tau;
            out.d_anchor.col(i) += w * f_disturb.col(k);
            out.d_disturb.col(k) += w * f_anchor.col(i);
        }
    }
    return out;
}

/// SGD+momentum state and schedule parameters.
struct OptState {
    TensorSet velocity;
    double base_lr = 0.8;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double power = 0.9;
    std::int64_t total_iters = 1;

    void validate() const {
        if (!(base_lr > 0.0)) throw config_error("base_lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw config_error("momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
        if (total_iters < 1) throw config_error("total_iters must be >= 1");
    }

    static OptState init(const EncoderParams& p) {
        OptState s;
        s.velocity = p.t.zeros_like();
        return s;
    }
};

/// Polynomial decay: base_lr * (1 - k/total)^power.
inline double poly_lr(std::int64_t k, const OptState& opt) {
    if (k < 0 || k > opt.total_iters) throw contract_error("poly_lr: iteration outside [0, total_iters]");
    return opt.base_lr * std::pow(1.0 - double(k) / double(opt.total_iters), opt.power);
}

/// One momentum step: v <- mu v + (g + wd theta); theta <- theta - lr(k) v.
/// Weight decay touches the weight matrices only, never the biases.
inline void sgd_step(EncoderParams& params, const TensorSet& grads, OptState& opt, std::int64_t k) {
    opt.validate();
    bool finite = true;
    grads.visit([&](const char*, bool, const auto& m) { finite = finite && m.allFinite(); });
    if (!finite) throw std::runtime_error("sgd_step: non-finite gradient, training aborted");
    const double lr = poly_lr(k, opt);
    TensorSet::visit3(params.t, grads, opt.velocity, [&](auto& theta, const auto& g, auto& v, bool is_weight) {
        const double wd = is_weight ? opt.weight_decay : 0.0;
        v = opt.momentum * v + (g + wd * theta);
        theta -= lr * v;
    });
}

}  // namespace p4c
