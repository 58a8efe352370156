#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "p4c/augment.hpp"
#include "p4c/common.hpp"
#include "p4c/loss.hpp"
#include "p4c/model.hpp"
#include "p4c/pairing.hpp"

namespace p4c {

enum class Objective { P4Contrast, PointContrast, CrossModal };
enum class HardnessMode { Progressive, Easy, Hard };
enum class TrainBranches { Joint, SeparateThenFuse };

inline Objective objective_from_string(const std::string& s) {
    if (s == "p4contrast") return Objective::P4Contrast;
    if (s == "pointcontrast") return Objective::PointContrast;
    if (s == "crossmodal") return Objective::CrossModal;
    throw config_error("unknown objective: " + s);
}

inline std::string to_string(Objective o) {
    switch (o) {
        case Objective::P4Contrast: return "p4contrast";
        case Objective::PointContrast: return "pointcontrast";
        case Objective::CrossModal: return "crossmodal";
    }
    return "?";
}

inline HardnessMode hardness_mode_from_string(const std::string& s) {
    if (s == "progressive") return HardnessMode::Progressive;
    if (s == "easy") return HardnessMode::Easy;
    if (s == "hard") return HardnessMode::Hard;
    throw config_error("unknown hardness mode: " + s);
}

inline std::string to_string(HardnessMode m) {
    switch (m) {
        case HardnessMode::Progressive: return "progressive";
        case HardnessMode::Easy: return "easy";
        case HardnessMode::Hard: return "hard";
    }
    return "?";
}

/// Flat `key = value` text. '#' starts a comment; blank lines are skipped;
/// duplicate keys are rejected.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        std::size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + " is not key = value: " + t);
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw config_error("config line " + std::to_string(lineno) + " has an empty key");
        if (kv.count(key)) throw config_error("duplicate config key: " + key);
        kv[key] = val;
    }
    return kv;
}

namespace detail {

/// Tracks which keys were consumed so leftovers can be reported as typos.
struct KvReader {
    std::map<std::string, std::string> kv;
    std::set<std::string> used;

    std::optional<std::string> get(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        used.insert(key);
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& def) { return get(key).value_or(def); }
    double get_double(const std::string& key, double def) {
        auto v = get(key);
        if (!v) return def;
        try {
            std::size_t pos = 0;
            double x = std::stod(*v, &pos);
            if (pos != v->size()) throw config_error("");
            return x;
        } catch (...) {
            throw config_error("config key " + key + " is not a number: " + *v);
        }
    }
    std::int64_t get_int(const std::string& key, std::int64_t def) {
        auto v = get(key);
        if (!v) return def;
        try {
            std::size_t pos = 0;
            std::int64_t x = std::stoll(*v, &pos);
            if (pos != v->size()) throw config_error("");
            return x;
        } catch (...) {
            throw config_error("config key " + key + " is not an integer: " + *v);
        }
    }
    bool get_bool(const std::string& key, bool def) {
        auto v = get(key);
        if (!v) return def;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw config_error("config key " + key + " is not a boolean: " + *v);
    }
    void reject_unknown() const {
        for (const auto& [k, v] : kv)
            if (!used.count(k)) throw config_error("unknown config key: " + k);
    }
};

inline std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

}  // namespace detail

/// Everything one pretraining run needs. Defaults follow the experiment scale
/// of this artifact; unset hardness/jitter values are derived from the corpus
/// extent and iteration budget.
struct TrainConfig {
    Objective objective = Objective::P4Contrast;
    FusionMode fusion = FusionMode::Hybrid;
    TrainBranches train_branches = TrainBranches::Joint;

    // corpus
    int corpus_train_scenes = 32;
    int corpus_test_scenes = 8;
    int corpus_primitives = 4;
    int corpus_points_per_primitive = 256;
    double corpus_extent = 1.0;
    std::uint64_t corpus_seed = 1234;

    // model
    int model_hidden = 32;
    int model_dim = 32;
    int model_knn_k = 8;

    AugmentConfig aug;
    HardnessSchedule schedule;
    HardnessMode hardness_mode = HardnessMode::Progressive;
    LossConfig loss;

    double opt_base_lr = 0.8;
    double opt_momentum = 0.9;
    double opt_weight_decay = 1e-4;
    double opt_power = 0.9;
    std::int64_t opt_total_iters = 0;  // 0 -> iterations

    int batch_size = 16;
    std::int64_t iterations = 1500;
    std::uint64_t seed = 1;

    int probe_steps = 500;
    double probe_lr = 0.1;
    int probe_samples_per_scene = 256;  // 0 -> all points

    std::int64_t lr_total_iters() const { return opt_total_iters > 0 ? opt_total_iters : std::max<std::int64_t>(iterations, 1); }

    void validate() const {
        if (corpus_train_scenes < 1 || corpus_test_scenes < 1) throw config_error("corpus needs train and test scenes");
        if (batch_size < 2) throw config_error("batch_size must be >= 2");
        if (iterations < 0) throw config_error("iterations must be >= 0");
        if (probe_steps < 1 || !(probe_lr > 0.0)) throw config_error("probe budget must be positive");
        if (probe_samples_per_scene < 0) throw config_error("probe.samples_per_scene must be >= 0");
        aug.validate();
        schedule.validate();
        if (!(schedule.h0 < schedule.epsilon))
            throw config_error("hardness modes need h0 < epsilon");
        loss.validate();
        if (!(opt_base_lr > 0.0)) throw config_error("opt.base_lr must be positive");
        if (objective == Objective::CrossModal && fusion != FusionMode::Late)
            throw config_error("crossmodal objective requires fusion = late");
        SceneConfig sc = scene_config();
        sc.validate();
        if (model_knn_k >= sc.primitives * sc.points_per_primitive)
            throw config_error("model.knn_k must be smaller than the scene point count");
    }

    SceneConfig scene_config() const {
        SceneConfig sc;
        sc.primitives = corpus_primitives;
        sc.points_per_primitive = corpus_points_per_primitive;
        sc.extent = corpus_extent;
        sc.class_table = make_class_table(corpus_seed, corpus_primitives);
        return sc;
    }

    /// Schedule actually driven during training: Easy pins the bound at h(0),
    /// Hard pins it at epsilon, Progressive uses the clipped linear ramp.
    HardnessSchedule effective_schedule() const {
        switch (hardness_mode) {
            case HardnessMode::Easy: return {schedule.h0, 0.0, schedule.epsilon};
            case HardnessMode::Hard: return {schedule.epsilon, 0.0, schedule.epsilon};
            case HardnessMode::Progressive: return schedule;
        }
        return schedule;
    }

    static TrainConfig from_map(const std::map<std::string, std::string>& kv) {
        detail::KvReader r{kv, {}};
        TrainConfig c;
        c.objective = objective_from_string(r.get_or("objective", "p4contrast"));
        c.fusion = fusion_from_string(r.get_or("fusion", c.objective == Objective::CrossModal ? "late" : "hybrid"));
        std::string tb = r.get_or("train_branches", "joint");
        if (tb == "joint")
            c.train_branches = TrainBranches::Joint;
        else if (tb == "separate-then-fuse")
            c.train_branches = TrainBranches::SeparateThenFuse;
        else
            throw config_error("unknown train_branches: " + tb);

        c.corpus_train_scenes = int(r.get_int("corpus.train_scenes", c.corpus_train_scenes));
        c.corpus_test_scenes = int(r.get_int("corpus.test_scenes", c.corpus_test_scenes));
        c.corpus_primitives = int(r.get_int("corpus.primitives", c.corpus_primitives));
        c.corpus_points_per_primitive = int(r.get_int("corpus.points_per_primitive", c.corpus_points_per_primitive));
        c.corpus_extent = r.get_double("corpus.extent", c.corpus_extent);
        c.corpus_seed = std::uint64_t(r.get_int("corpus.seed", std::int64_t(c.corpus_seed)));

        c.model_hidden = int(r.get_int("model.hidden", c.model_hidden));
        c.model_dim = int(r.get_int("model.dim", c.model_dim));
        c.model_knn_k = int(r.get_int("model.knn_k", c.model_knn_k));

        c.batch_size = int(r.get_int("batch_size", c.batch_size));
        c.iterations = r.get_int("iterations", c.iterations);
        c.seed = std::uint64_t(r.get_int("seed", std::int64_t(c.seed)));

        if (auto mode = r.get("aug.mode")) parse_aug_modes(*mode, c.aug);
        c.aug.sigma_xyz = r.get_double("aug.sigma_xyz", 0.02 * c.corpus_extent);
        c.aug.sigma_rgb = r.get_double("aug.sigma_rgb", 0.05);
        c.aug.rot_range = r.get_double("aug.rot_range", c.aug.rot_range);
        c.aug.scal_range = r.get_double("aug.scal_range", c.aug.scal_range);
        c.aug.trans_range = r.get_double("aug.trans_range", 0.25 * c.corpus_extent);

        c.hardness_mode = hardness_mode_from_string(r.get_or("hardness.mode", "progressive"));
        c.schedule.h0 = r.get_double("hardness.h0", 1.0 / c.corpus_extent);
        c.schedule.epsilon = r.get_double("hardness.epsilon", 20.0 / c.corpus_extent);
        // default: the bound reaches epsilon at 80% of the iteration budget
        double default_slope = c.iterations > 0
                                   ? (c.schedule.epsilon - c.schedule.h0) / (0.8 * double(c.iterations))
                                   : 0.0;
        c.schedule.slope = r.get_double("hardness.slope", default_slope);

        c.loss.tau = r.get_double("loss.tau", c.loss.tau);
        c.loss.include_positive_in_denominator = r.get_bool("loss.include_positive", false);

        c.opt_base_lr = r.get_double("opt.base_lr", c.opt_base_lr);
        c.opt_momentum = r.get_double("opt.momentum", c.opt_momentum);
        c.opt_weight_decay = r.get_double("opt.weight_decay", c.opt_weight_decay);
        c.opt_power = r.get_double("opt.power", c.opt_power);
        c.opt_total_iters = r.get_int("opt.total_iters", 0);

        c.probe_steps = int(r.get_int("probe.steps", c.probe_steps));
        c.probe_lr = r.get_double("probe.lr", c.probe_lr);
        c.probe_samples_per_scene = int(r.get_int("probe.samples_per_scene", c.probe_samples_per_scene));

        r.reject_unknown();
        c.validate();
        return c;
    }

    static TrainConfig from_text(const std::string& text) { return from_map(parse_config_text(text)); }

    /// Canonical resolved text: every key, sorted, full precision. Equal
    /// configurations produce equal text (and equal fingerprints).
    std::string to_text() const {
        using detail::fmt_double;
        std::map<std::string, std::string> kv;
        kv["objective"] = p4c::to_string(objective);
        kv["fusion"] = p4c::to_string(fusion);
        kv["train_branches"] = train_branches == TrainBranches::Joint ? "joint" : "separate-then-fuse";
        kv["corpus.train_scenes"] = std::to_string(corpus_train_scenes);
        kv["corpus.test_scenes"] = std::to_string(corpus_test_scenes);
        kv["corpus.primitives"] = std::to_string(corpus_primitives);
        kv["corpus.points_per_primitive"] = std::to_string(corpus_points_per_primitive);
        kv["corpus.extent"] = fmt_double(corpus_extent);
        kv["corpus.seed"] = std::to_string(corpus_seed);
        kv["model.hidden"] = std::to_string(model_hidden);
        kv["model.dim"] = std::to_string(model_dim);
        kv["model.knn_k"] = std::to_string(model_knn_k);
        kv["aug.mode"] = aug.mode_string();
        kv["aug.sigma_xyz"] = fmt_double(aug.sigma_xyz);
        kv["aug.sigma_rgb"] = fmt_double(aug.sigma_rgb);
        kv["aug.rot_range"] = fmt_double(aug.rot_range);
        kv["aug.scal_range"] = fmt_double(aug.scal_range);
        kv["aug.trans_range"] = fmt_double(aug.trans_range);
        kv["hardness.mode"] = p4c::to_string(hardness_mode);
        kv["hardness.h0"] = fmt_double(schedule.h0);
        kv["hardness.slope"] = fmt_double(schedule.slope);
        kv["hardness.epsilon"] = fmt_double(schedule.epsilon);
        kv["loss.tau"] = fmt_double(loss.tau);
        kv["loss.include_positive"] = loss.include_positive_in_denominator ? "true" : "false";
        kv["opt.base_lr"] = fmt_double(opt_base_lr);
        kv["opt.momentum"] = fmt_double(opt_momentum);
        kv["opt.weight_decay"] = fmt_double(opt_weight_decay);
        kv["opt.power"] = fmt_double(opt_power);
        kv["opt.total_iters"] = std::to_string(lr_total_iters());
        kv["batch_size"] = std::to_string(batch_size);
        kv["iterations"] = std::to_string(iterations);
        kv["seed"] = std::to_string(seed);
        kv["probe.steps"] = std::to_string(probe_steps);
        kv["probe.lr"] = fmt_double(probe_lr);
        kv["probe.samples_per_scene"] = std::to_string(probe_samples_per_scene);
        std::string out;
        for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
        return out;
    }

    /// FNV-1a of the canonical text, as fixed-width hex.
    std::string fingerprint() const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fnv1a64(to_text()));
        return buf;
    }
};

}  // namespace p4c
