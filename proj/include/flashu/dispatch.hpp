#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashu/common.hpp"
#include "flashu/genpipe.hpp"
#include "flashu/model.hpp"
#include "flashu/plan.hpp"
#include "flashu/undpipe.hpp"

namespace flashu {

struct Request {
    Task task = Task::Gen;
    std::vector<int> prompt_tokens;                 // gen
    std::vector<int> visual_tokens, text_tokens;    // und
    nlohmann::json overrides = nlohmann::json::object();
};

// Task defaults: generation follows T = 0.7*T0 with T0 = 50, tau = 0.3,
// r_p = 0.20, r_LS = 0.20, T_LS = 10, T_cache = 5, t_switch = 0.3,
// s_low = 0.75*s0, s_high = s0 = 5.0. Understanding follows N_max = 128,
// tau = 0.3, r_p = 0.10, r_LS = 0.10, T_LS = 10, L_prune = 2, rho = 0.50.
inline nlohmann::json default_config(Task task) {
    if (task == Task::Gen) {
        return {{"T0", 50},      {"T", 35},           {"tau", 0.3},   {"r_p", 0.2},
                {"r_ls", 0.2},   {"T_ls", 10},        {"T_cache", 5}, {"t_switch", 0.3},
                {"s0", 5.0},     {"s_low", 3.75},     {"s_high", 5.0}, {"seed", 0},
                {"n_cond", 8}};
    }
    return {{"N_max", 128}, {"tau", 0.3},  {"r_p", 0.1},  {"r_ls", 0.1}, {"T_ls", 10},
            {"L_prune", 2}, {"rho", 0.5},  {"N_calib", 20}, {"eos", 1},  {"n_vis", 64},
            {"n_text", 8},  {"seed", 0}};
}

inline nlohmann::json resolve_config(const Request& request) {
    nlohmann::json cfg = default_config(request.task);
    for (auto it = request.overrides.begin(); it != request.overrides.end(); ++it) {
        if (!cfg.contains(it.key())) {
            std::string valid;
            for (auto jt = cfg.begin(); jt != cfg.end(); ++jt) {
                if (!valid.empty()) valid += ", ";
                valid += jt.key();
            }
            throw ConfigError("unknown config key '" + it.key() + "' for task " +
                              task_name(request.task) + "; valid keys: " + valid);
        }
        cfg[it.key()] = it.value();
    }
    return cfg;
}

inline GenConfig gen_config_from_json(const nlohmann::json& cfg) {
    GenConfig g;
    g.t_steps = cfg.at("T").get<int>();
    g.t0 = cfg.at("T0").get<int>();
    g.tau = cfg.at("tau").get<double>();
    g.r_p = cfg.at("r_p").get<double>();
    g.r_ls = cfg.at("r_ls").get<double>();
    g.t_ls = cfg.at("T_ls").get<int>();
    g.t_cache = cfg.at("T_cache").get<int>();
    g.sched.t_switch_frac = cfg.at("t_switch").get<double>();
    g.sched.s_low = cfg.at("s_low").get<double>();
    g.sched.s_high = cfg.at("s_high").get<double>();
    g.seed = cfg.at("seed").get<std::uint64_t>();
    return g;
}

inline UndConfig und_config_from_json(const nlohmann::json& cfg) {
    UndConfig u;
    u.n_max = cfg.at("N_max").get<int>();
    u.tau = cfg.at("tau").get<double>();
    u.r_p = cfg.at("r_p").get<double>();
    u.r_ls = cfg.at("r_ls").get<double>();
    u.t_ls = cfg.at("T_ls").get<int>();
    u.l_prune = cfg.at("L_prune").get<std::size_t>();
    u.rho = cfg.at("rho").get<double>();
    u.eos_token = cfg.at("eos").get<int>();
    return u;
}

// Override set that disables every acceleration mechanism, giving the
// vanilla-equivalent configuration.
inline nlohmann::json baseline_overrides(Task task) {
    if (task == Task::Gen) {
        return {{"T", 50}, {"r_p", 0.0}, {"r_ls", 0.0}, {"T_cache", 1}, {"s_low", 5.0}};
    }
    return {{"r_p", 0.0}, {"r_ls", 0.0}, {"rho", 0.0}};
}

struct Response {
    Task task = Task::Gen;
    Tensor latent;            // gen
    std::vector<int> tokens;  // und
    RunReport report;
};

// Algorithm dispatch: routes to the generation or understanding pathway.
// The two pathways share only the read-only bundle and plan.
inline Response run(const Request& request, const ModelBundle& bundle, const PrunePlan* plan) {
    const nlohmann::json cfg = resolve_config(request);
    Response resp;
    resp.task = request.task;
    if (request.task == Task::Gen) {
        if (request.prompt_tokens.empty() || !request.visual_tokens.empty()) {
            throw DataError("gen request must carry prompt tokens only");
        }
        GenResult r = generate(bundle, request.prompt_tokens, gen_config_from_json(cfg), plan);
        resp.latent = std::move(r.latent);
        resp.report = std::move(r.report);
    } else {
        if (request.text_tokens.empty() || !request.prompt_tokens.empty()) {
            throw DataError("und request must carry visual/text tokens only");
        }
        UndResult r = understand(bundle, request.visual_tokens, request.text_tokens,
                                 und_config_from_json(cfg), plan);
        resp.tokens = std::move(r.tokens);
        resp.report = std::move(r.report);
    }
    resp.report.config = cfg;
    return resp;
}

}  // namespace flashu
