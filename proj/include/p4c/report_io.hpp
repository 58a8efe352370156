#pragma once

#include <fstream>
#include <numeric>
#include <string>

#include <json.hpp>

#include "p4c/harness.hpp"

namespace p4c {

namespace detail {

inline nlohmann::ordered_json probe_json(const ProbeResult& p) {
    nlohmann::ordered_json j;
    j["mean_iou"] = p.mean_iou;
    j["per_class_iou"] = p.per_class_iou;
    j["class_in_train"] = std::vector<int>(p.class_in_train.begin(), p.class_in_train.end());
    return j;
}

inline double curve_mean(const std::vector<double>& v, std::size_t from, std::size_t count) {
    if (v.empty() || count == 0) return 0.0;
    from = std::min(from, v.size());
    count = std::min(count, v.size() - from);
    if (count == 0) return 0.0;
    return std::accumulate(v.begin() + from, v.begin() + from + count, 0.0) / double(count);
}

}  // namespace detail

/// Deterministic run summary. Per-iteration curves live in metrics.csv; wall
/// time is reported on the console only so reruns of a fingerprint byte-match.
inline std::string report_to_json(const RunReport& r) {
    nlohmann::ordered_json j;
    j["fingerprint"] = r.fingerprint;
    j["iterations"] = r.loss_curve.size();
    j["fallback_total"] = r.fallback_total;
    j["final_collapse"] = r.final_collapse;
    nlohmann::ordered_json cps = nlohmann::ordered_json::array();
    for (const auto& [iter, value] : r.collapse_checkpoints) cps.push_back({iter, value});
    j["collapse_checkpoints"] = cps;
    const std::size_t window = std::min<std::size_t>(100, r.loss_curve.size());
    j["loss_first_window_mean"] = detail::curve_mean(r.loss_curve, 0, window);
    j["loss_last_window_mean"] = detail::curve_mean(r.loss_curve, r.loss_curve.size() - window, window);
    j["probe"] = detail::probe_json(r.probe);
    j["probe_random"] = detail::probe_json(r.probe_random);
    return j.dump(2) + "\n";
}

inline void write_report_file(const std::string& path, const RunReport& r) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw config_error("cannot open report file for writing: " + path);
    os << report_to_json(r);
}

}  // namespace p4c
