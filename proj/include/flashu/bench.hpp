#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flashu/common.hpp"
#include "flashu/dispatch.hpp"
#include "flashu/model.hpp"
#include "flashu/report.hpp"
#include "flashu/sensitivity.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

namespace detail {

inline std::uint64_t attn_flops(std::uint64_t n, std::uint64_t d) {
    // 4 projections (2nd^2 each) + per-head QK^T and AV (4n^2 d combined).
    return 8 * n * d * d + 4 * n * n * d;
}

inline std::uint64_t ffn_flops(std::uint64_t n, std::uint64_t d, std::uint64_t width) {
    return 4 * n * d * width;
}

}  // namespace detail

// Closed-form FLOP prediction for one run. Counts exactly the matmuls the
// ledger counts, from the same scheduling rules, so measured == predicted is
// an integer identity for every configuration.
inline std::map<std::string, std::uint64_t> predict_gen(const ModelConfig& mc,
                                                        const nlohmann::json& cfg) {
    const std::uint64_t d = mc.d_model, dff = mc.d_ffn, L = mc.n_layers;
    const std::uint64_t n_img = mc.n_img_tokens;
    const std::uint64_t n = cfg.at("n_cond").get<std::uint64_t>() + n_img;
    const int t_steps = cfg.at("T").get<int>();
    const int t_ls = cfg.at("T_ls").get<int>();
    const int t_cache = cfg.at("T_cache").get<int>();
    const double tau = cfg.at("tau").get<double>();
    const double r_p = cfg.at("r_p").get<double>();
    const double r_ls = cfg.at("r_ls").get<double>();
    const std::uint64_t kept = dff - masked_neuron_count(r_p, dff);
    const std::uint64_t skip_size =
        static_cast<std::uint64_t>(std::ceil(r_ls * static_cast<double>(L)));
    const bool use_pruned = r_p > 0.0;

    std::map<std::string, std::uint64_t> out{{"trunk.attn", 0}, {"trunk.ffn", 0}, {"diff_head", 0}};
    for (int k = 0; k < t_steps; ++k) {
        const float t_norm = static_cast<float>(t_steps - k) / static_cast<float>(t_steps);
        const bool recalc = k % t_ls == 0;
        const std::uint64_t layers = recalc ? L : L - skip_size;
        const bool pruned = use_pruned && t_norm > tau;
        // two branches (cond + uncond) per step
        out["trunk.attn"] += 2 * layers * detail::attn_flops(n, d);
        out["trunk.ffn"] += 2 * layers * detail::ffn_flops(n, d, pruned ? kept : dff);
        const bool miss = k % t_cache == 0;
        const std::uint64_t head =
            miss ? (mc.n_head_layers + 1ULL) * 2 * n_img * d * d : 2 * n_img * d * d;
        out["diff_head"] += 2 * head;
    }
    return out;
}

// Und prediction needs the realized decode step count (EOS may stop early).
inline std::map<std::string, std::uint64_t> predict_und(const ModelConfig& mc,
                                                        const nlohmann::json& cfg,
                                                        int decode_steps) {
    const std::uint64_t d = mc.d_model, dff = mc.d_ffn, L = mc.n_layers;
    const std::uint64_t n_vis = cfg.at("n_vis").get<std::uint64_t>();
    const std::uint64_t n_text = cfg.at("n_text").get<std::uint64_t>();
    const std::uint64_t l_prune = cfg.at("L_prune").get<std::uint64_t>();
    const int t_ls = cfg.at("T_ls").get<int>();
    const int n_max = cfg.at("N_max").get<int>();
    const double tau = cfg.at("tau").get<double>();
    const double r_p = cfg.at("r_p").get<double>();
    const double r_ls = cfg.at("r_ls").get<double>();
    const double rho = cfg.at("rho").get<double>();
    const std::uint64_t kept = dff - masked_neuron_count(r_p, dff);
    const std::uint64_t skip_size =
        static_cast<std::uint64_t>(std::ceil(r_ls * static_cast<double>(L)));
    const bool use_pruned = r_p > 0.0;
    const std::uint64_t n0 = n_vis + n_text;
    const std::uint64_t pruned_tokens =
        static_cast<std::uint64_t>(std::ceil(rho * static_cast<double>(n_vis)));
    const std::uint64_t n1 = n0 - pruned_tokens;

    std::map<std::string, std::uint64_t> out{{"trunk.attn", 0}, {"trunk.ffn", 0}, {"lm_head", 0}};
    // Prefill: full path, all layers; attention sees the pre-prune length up
    // to and including l_prune, the FFN sees the reduced length from l_prune on.
    for (std::uint64_t l = 0; l < L; ++l) {
        const std::uint64_t n_attn = l <= l_prune ? n0 : n1;
        const std::uint64_t n_ffn = l < l_prune ? n0 : n1;
        out["trunk.attn"] += detail::attn_flops(n_attn, d);
        out["trunk.ffn"] += detail::ffn_flops(n_ffn, d, dff);
    }
    for (int i = 0; i < decode_steps; ++i) {
        const std::uint64_t n = n1 + static_cast<std::uint64_t>(i);
        const bool recalc = i % t_ls == 0;
        const std::uint64_t layers = recalc ? L : L - skip_size;
        const int token_idx = i + 1;
        const bool full =
            !use_pruned || token_idx <= static_cast<int>(std::ceil(tau * n_max));
        out["trunk.attn"] += layers * detail::attn_flops(n, d);
        out["trunk.ffn"] += layers * detail::ffn_flops(n, d, full ? dff : kept);
        out["lm_head"] += 2 * d * mc.vocab_size;
    }
    return out;
}

inline std::map<std::string, std::uint64_t> predict(const ModelConfig& mc, Task task,
                                                    const nlohmann::json& cfg,
                                                    int decode_steps = 0) {
    return task == Task::Gen ? predict_gen(mc, cfg) : predict_und(mc, cfg, decode_steps);
}

struct SpeedupTable {
    std::map<std::string, double> flop_ratio;  // baseline / run, per component
    double total_flop_ratio = 0.0;
    double wallclock_ratio = 0.0;
    bool run_matches_predicted = false;
    bool baseline_matches_predicted = false;
};

inline bool ledger_matches(const FlopLedger& ledger,
                           const std::map<std::string, std::uint64_t>& predicted) {
    for (const auto& [label, flops] : predicted) {
        if (ledger.get(label) != flops) return false;
    }
    for (const auto& [label, flops] : ledger.counters) {
        if (!predicted.count(label) && flops != 0) return false;
    }
    return true;
}

inline std::uint64_t time_total(const std::map<std::string, std::uint64_t>& t) {
    std::uint64_t s = 0;
    for (const auto& [k, v] : t) s += v;
    return s;
}

inline SpeedupTable compare(const RunReport& run, const RunReport& baseline,
                            const ModelConfig& mc) {
    if (run.task != baseline.task) {
        throw DataError("compare: reports are for different tasks");
    }
    const Task task = run.task == "gen" ? Task::Gen : Task::Und;
    SpeedupTable t;
    for (const auto& [label, base_flops] : baseline.ledger.counters) {
        const std::uint64_t run_flops = run.ledger.get(label);
        if (run_flops > 0) {
            t.flop_ratio[label] =
                static_cast<double>(base_flops) / static_cast<double>(run_flops);
        }
    }
    t.total_flop_ratio =
        static_cast<double>(baseline.ledger.total()) / static_cast<double>(run.ledger.total());
    const std::uint64_t run_ns = time_total(run.time_ns), base_ns = time_total(baseline.time_ns);
    t.wallclock_ratio = run_ns > 0 ? static_cast<double>(base_ns) / static_cast<double>(run_ns) : 0.0;
    t.run_matches_predicted = ledger_matches(run.ledger, predict(mc, task, run.config, run.steps));
    t.baseline_matches_predicted =
        ledger_matches(baseline.ledger, predict(mc, task, baseline.config, baseline.steps));
    return t;
}

struct AblationCell {
    std::string name;
    nlohmann::json overrides;
};

struct AblationRow {
    std::string name;
    nlohmann::json config;
    double flop_speedup = 0.0;
    double wallclock_speedup = 0.0;
    std::uint64_t checksum = 0;
    bool matches_predicted = false;
    std::string error;
};

// The five rows mirroring the standard ablation structure, ahead of any
// user-supplied sweep cells.
inline std::vector<AblationCell> standard_ablation_cells(Task task) {
    if (task == Task::Gen) {
        return {
            {"full", nlohmann::json::object()},
            {"no_layer_skipping", {{"r_ls", 0.0}}},
            {"no_hybrid_ffn", {{"tau", 0.0}}},
            {"no_adaptive_guidance", {{"s_low", 5.0}}},
            {"ffn_pruning_only",
             {{"r_ls", 0.0}, {"T_cache", 1}, {"s_low", 5.0}}},
        };
    }
    return {
        {"full", nlohmann::json::object()},
        {"no_layer_skipping", {{"r_ls", 0.0}}},
        {"no_hybrid_ffn", {{"tau", 0.0}}},
        {"no_token_pruning", {{"rho", 0.0}}},
        {"ffn_pruning_only", {{"r_ls", 0.0}, {"rho", 0.0}}},
    };
}

inline Request make_request(Task task, const nlohmann::json& cfg, std::uint64_t payload_seed,
                            const ModelConfig& mc) {
    Request req;
    req.task = task;
    if (task == Task::Gen) {
        req.prompt_tokens =
            synthetic_prompt(payload_seed, cfg.at("n_cond").get<std::size_t>(), mc.vocab_size);
    } else {
        const auto n_vis = cfg.at("n_vis").get<std::size_t>();
        const auto n_text = cfg.at("n_text").get<std::size_t>();
        std::vector<int> all = synthetic_prompt(payload_seed, n_vis + n_text, mc.vocab_size);
        req.visual_tokens.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_vis));
        req.text_tokens.assign(all.begin() + static_cast<std::ptrdiff_t>(n_vis), all.end());
    }
    return req;
}

// One deterministic run per cell against a shared baseline run. A failing
// cell records its error and the sweep continues. Cells are independent, so
// jobs > 1 runs them on a worker pool over the shared read-only bundle.
inline std::vector<AblationRow> ablate(const ModelBundle& bundle, const PrunePlan* plan, Task task,
                                       const std::vector<AblationCell>& grid,
                                       std::uint64_t payload_seed = 7, int jobs = 1) {
    Request base_req = make_request(task, default_config(task), payload_seed, bundle.config);
    base_req.overrides = baseline_overrides(task);
    const Response baseline = run(base_req, bundle, plan);

    std::vector<AblationRow> rows(grid.size());
    auto run_cell = [&](std::size_t i) {
        AblationRow& row = rows[i];
        row.name = grid[i].name;
        try {
            Request req = make_request(task, default_config(task), payload_seed, bundle.config);
            req.overrides = grid[i].overrides;
            const Response resp = run(req, bundle, plan);
            row.config = resp.report.config;
            const SpeedupTable t = compare(resp.report, baseline.report, bundle.config);
            row.flop_speedup = t.total_flop_ratio;
            row.wallclock_speedup = t.wallclock_ratio;
            row.checksum = resp.report.output_checksum;
            row.matches_predicted = t.run_matches_predicted && t.baseline_matches_predicted;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
    };
    if (jobs <= 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) run_cell(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < jobs; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1)) {
                    run_cell(i);
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    return rows;
}

inline std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        out += c;
        if (c == '"') out += '"';
    }
    out += '"';
    return out;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open ablation CSV for writing: " + path);
    f << "config_id,mechanism_flags,flop_speedup,wallclock_speedup,checksum,matches_predicted,error\n";
    for (const auto& r : rows) {
        f << r.name << "," << csv_quote(r.config.is_null() ? "" : r.config.dump()) << ","
          << r.flop_speedup << "," << r.wallclock_speedup << "," << hex64(r.checksum) << ","
          << (r.matches_predicted ? 1 : 0) << "," << r.error << "\n";
    }
}

// ---------------------------------------------------------------------------
// Analysis reports: specialization fractions, layer-similarity structure on
// one trace per task, and the attention-mass-vs-v-norm correlation.
// ---------------------------------------------------------------------------

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw DataError("pearson: need matched series");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va < 1e-18 || vb < 1e-18) throw DataError("pearson: zero-variance series");
    return cov / std::sqrt(va * vb);
}

// Per-layer hidden states for one forward trace (layer 0 input included).
inline std::vector<Tensor> layer_trace(const ModelBundle& m, const Tensor& input, AttnMode mode) {
    FlopLedger off;
    off.enabled = false;
    std::vector<Tensor> states{input};
    Tensor h = input;
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        h = trunk_block(m, l, h, mode, FfnPath::Full, Task::Gen, nullptr, off);
        states.push_back(h);
    }
    return states;
}

inline nlohmann::json similarity_analysis(const std::vector<Tensor>& states) {
    const std::size_t L = states.size() - 1;
    nlohmann::json matrix = nlohmann::json::array();
    for (std::size_t i = 1; i <= L; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 1; j <= L; ++j) {
            row.push_back(cosine_sim(states[i], states[j]));
        }
        matrix.push_back(row);
    }
    nlohmann::json in_out = nlohmann::json::array();
    for (std::size_t l = 0; l < L; ++l) in_out.push_back(sim_gen(states[l], states[l + 1]));
    return {{"inter_layer_matrix", matrix}, {"input_output_similarity", in_out}};
}

inline nlohmann::json analysis_reports(const ModelBundle& m, const CalibrationSet& calib_gen,
                                       const CalibrationSet& calib_und, std::size_t l_prune,
                                       std::uint64_t seed) {
    nlohmann::json j;

    const SensitivityScores gen_scores = score_all_layers(m, calib_gen);
    const SensitivityScores und_scores = score_all_layers(m, calib_und);
    nlohmann::json spec = nlohmann::json::array();
    for (const auto& f : specialization_report(gen_scores, und_scores)) {
        spec.push_back({{"gen_only", f.gen_only}, {"und_only", f.und_only}, {"shared", f.shared}});
    }
    j["specialization"] = spec;

    // One Gen trace: noisy latent behind a synthetic prompt, full attention.
    {
        const std::vector<int> prompt = synthetic_prompt(seed, 8, m.config.vocab_size);
        const Tensor z = gaussian_latent(seed, m.config.n_img_tokens, m.config.d_model);
        const std::size_t d = m.config.d_model;
        Tensor h({prompt.size() + m.config.n_img_tokens, d});
        const Tensor text = embed_with_positions(m, prompt);
        std::copy(text.data(), text.data() + text.size(), h.data());
        for (std::size_t r = 0; r < m.config.n_img_tokens; ++r) {
            const Tensor pos = position_embedding(prompt.size() + r, d);
            for (std::size_t c = 0; c < d; ++c) h.at(prompt.size() + r, c) = z.at(r, c) + pos[c];
        }
        j["gen_trace"] = similarity_analysis(layer_trace(m, h, AttnMode::Full));
    }

    // One Und trace plus the attention-mass vs v-norm relation at l_prune.
    {
        const std::vector<int> tokens =
            synthetic_prompt(seed + 1, m.config.n_img_tokens + 8, m.config.vocab_size);
        const Tensor h0 = embed_with_positions(m, tokens);
        j["und_trace"] = similarity_analysis(layer_trace(m, h0, AttnMode::Causal));

        FlopLedger off;
        off.enabled = false;
        Tensor h = h0;
        for (std::size_t l = 0; l < l_prune; ++l) {
            h = trunk_block(m, l, h, AttnMode::Causal, FfnPath::Full, Task::Und, nullptr, off);
        }
        AttnCapture capture;
        capture.want_mass = true;
        attn_sublayer(m, l_prune, h, AttnMode::Causal, off, &capture);
        const Tensor vnorms = vnorm_scores(capture.values, 0, m.config.n_img_tokens);
        std::vector<double> mass, norms;
        for (std::size_t i = 0; i < m.config.n_img_tokens; ++i) {
            mass.push_back(capture.attn_mass[i]);
            norms.push_back(vnorms[i]);
        }
        j["attention_vs_vnorm"] = {{"pearson", pearson(mass, norms)},
                                   {"attention_mass", mass},
                                   {"vnorm", norms}};
    }
    return j;
}

}  // namespace flashu
