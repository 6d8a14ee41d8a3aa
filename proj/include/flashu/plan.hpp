#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashu/common.hpp"

namespace flashu {

// Per-layer keep mask for one task. true = neuron kept.
struct LayerMask {
    std::vector<bool> keep;
    std::size_t kept_count() const {
        std::size_t n = 0;
        for (bool b : keep) n += b ? 1 : 0;
        return n;
    }
    std::vector<std::size_t> masked_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (!keep[i]) out.push_back(i);
        return out;
    }
};

// Static per-task, per-layer FFN neuron masks plus the hybrid-switch
// threshold tau. Exactly floor(r_p * d_ffn) neurons are masked per layer.
struct PrunePlan {
    std::map<Task, std::vector<LayerMask>> masks;
    double r_p = 0.0;
    double tau = 0.3;
    std::string method = "wanda";

    bool has_task(Task t) const { return masks.count(t) > 0; }

    const LayerMask& mask(Task t, std::size_t layer) const {
        auto it = masks.find(t);
        if (it == masks.end() || layer >= it->second.size()) {
            throw ConfigError(std::string("prune plan has no mask for task ") + task_name(t) +
                              " layer " + std::to_string(layer));
        }
        return it->second[layer];
    }
};

inline std::size_t masked_neuron_count(double r_p, std::size_t d_ffn) {
    return static_cast<std::size_t>(std::floor(r_p * static_cast<double>(d_ffn)));
}

enum class FfnPath { Full, Pruned };

// Hybrid full/pruned switch. Gen uses the normalized noise time
// t in (0,1] (t=1 is the noisiest step): pruned iff t > tau. Und uses the
// 1-based generated-token index against N_max: full iff n <= ceil(tau*N_max).
struct HybridSwitch {
    double tau = 0.3;
    Task domain = Task::Gen;
    int n_max = 128;  // Und only
};

inline FfnPath select_path(const HybridSwitch& sw, double t) {
    if (sw.domain == Task::Gen) {
        if (t <= 0.0 || t > 1.0) {
            throw DomainError("select_path: gen time must lie in (0,1], got " + std::to_string(t));
        }
        return t > sw.tau ? FfnPath::Pruned : FfnPath::Full;
    }
    const int n = static_cast<int>(t);
    if (n < 1) throw DomainError("select_path: und token index must be >= 1");
    const int boundary = static_cast<int>(std::ceil(sw.tau * sw.n_max));
    return n <= boundary ? FfnPath::Full : FfnPath::Pruned;
}

// E[C] = tau * C_f + (1 - tau) * C_p.
inline double expected_cost(double tau, double c_full, double c_pruned) {
    return tau * c_full + (1.0 - tau) * c_pruned;
}

// Plan file: {task -> layer -> {masked_indices, r_p, tau, method}},
// indices sorted ascending.
inline nlohmann::json plan_to_json(const PrunePlan& plan, std::size_t d_ffn) {
    nlohmann::json j;
    j["d_ffn"] = d_ffn;
    for (const auto& [task, layers] : plan.masks) {
        nlohmann::json jt;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            jt[std::to_string(l)] = {{"masked_indices", layers[l].masked_indices()},
                                     {"r_p", plan.r_p},
                                     {"tau", plan.tau},
                                     {"method", plan.method}};
        }
        j[task_name(task)] = jt;
    }
    return j;
}

inline PrunePlan plan_from_json(const nlohmann::json& j) {
    PrunePlan plan;
    if (!j.contains("d_ffn")) throw FormatError("plan file missing d_ffn");
    const std::size_t d_ffn = j.at("d_ffn").get<std::size_t>();
    for (Task task : {Task::Gen, Task::Und}) {
        if (!j.contains(task_name(task))) continue;
        const auto& jt = j.at(task_name(task));
        std::vector<LayerMask> layers(jt.size());
        for (auto it = jt.begin(); it != jt.end(); ++it) {
            const std::size_t l = std::stoul(it.key());
            if (l >= layers.size()) throw FormatError("plan file has non-contiguous layer keys");
            LayerMask m;
            m.keep.assign(d_ffn, true);
            for (std::size_t idx : it.value().at("masked_indices").get<std::vector<std::size_t>>()) {
                if (idx >= d_ffn) throw FormatError("plan mask index out of range");
                m.keep[idx] = false;
            }
            layers[l] = std::move(m);
            plan.r_p = it.value().at("r_p").get<double>();
            plan.tau = it.value().at("tau").get<double>();
            plan.method = it.value().at("method").get<std::string>();
        }
        plan.masks[task] = std::move(layers);
    }
    return plan;
}

inline void save_plan(const PrunePlan& plan, std::size_t d_ffn, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open plan file for writing: " + path);
    f << plan_to_json(plan, d_ffn).dump(2) << "\n";
}

inline PrunePlan load_plan(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open plan file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed plan JSON: ") + e.what());
    }
    return plan_from_json(j);
}

}  // namespace flashu
