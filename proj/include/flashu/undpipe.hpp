#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/layerskip.hpp"
#include "flashu/model.hpp"
#include "flashu/plan.hpp"
#include "flashu/report.hpp"
#include "flashu/tensor.hpp"
#include "flashu/tokenprune.hpp"

namespace flashu {

struct UndConfig {
    int n_max = 128;
    double tau = 0.3;
    double r_p = 0.1;
    double r_ls = 0.1;
    int t_ls = 10;
    std::size_t l_prune = 2;
    double rho = 0.5;
    int eos_token = 1;
};

struct PrefillResult {
    Tensor hidden;
    SequenceLayout layout;
    std::vector<double> sims;  // per-layer final-position similarity
};

// Pathway B prefill: full causal forward with the full FFN path; V-norm
// token pruning fires once, inside layer l_prune between attention and FFN.
inline PrefillResult prefill(const ModelBundle& m, const std::vector<int>& visual_tokens,
                             const std::vector<int>& text_tokens, const UndConfig& cfg,
                             RunReport& report) {
    if (text_tokens.empty()) throw DataError("understanding prefill needs text tokens");
    if (cfg.l_prune >= m.config.n_layers) {
        throw ConfigError("l_prune must name a trunk layer below n_layers");
    }
    const std::size_t L = m.config.n_layers;

    PrefillResult res;
    res.layout.visual_begin = 0;
    res.layout.visual_end = visual_tokens.size();
    res.layout.tokens = visual_tokens;
    res.layout.tokens.insert(res.layout.tokens.end(), text_tokens.begin(), text_tokens.end());
    res.layout.positions.resize(res.layout.tokens.size());
    for (std::size_t i = 0; i < res.layout.positions.size(); ++i) res.layout.positions[i] = i;

    Tensor h;
    {
        ScopedTimer timer(report, "trunk.embed");
        h = embed_with_positions(m, res.layout.tokens, res.layout.positions);
    }
    res.sims.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        const Tensor h_in = h;
        const bool prune_here = l == cfg.l_prune && !visual_tokens.empty();
        AttnCapture capture;
        {
            ScopedTimer timer(report, "trunk.attn");
            h = attn_sublayer(m, l, h, AttnMode::Causal, report.ledger,
                              prune_here ? &capture : nullptr);
        }
        if (prune_here) {
            const Tensor scores =
                vnorm_scores(capture.values, res.layout.visual_begin, res.layout.visual_end);
            const std::vector<std::size_t> pruned = select_pruned(scores, cfg.rho);
            for (std::size_t rel : pruned) {
                report.pruned_tokens.push_back(res.layout.visual_begin + rel);
            }
            h = apply_prune(h, pruned, res.layout);
            report.visual_kept = res.layout.visual_count();
        }
        {
            ScopedTimer timer(report, "trunk.ffn");
            h = ffn_sublayer(m, l, h, FfnPath::Full, Task::Und, nullptr, report.ledger);
        }
        // Final-position similarity; the last (text) token survives pruning,
        // so the comparison is between the same token even at l_prune.
        res.sims[l] = cosine_sim(h_in.data() + (h_in.rows() - 1) * h_in.cols(),
                                 h.data() + (h.rows() - 1) * h.cols(), h.cols());
    }
    res.hidden = std::move(h);
    return res;
}

struct UndResult {
    std::vector<int> tokens;
    RunReport report;
};

// Greedy decode with layer skipping and the hybrid FFN switch. The full
// surviving prefix is recomputed every step; generated tokens take positions
// continuing from the original (pre-prune) sequence length.
inline UndResult understand(const ModelBundle& m, const std::vector<int>& visual_tokens,
                            const std::vector<int>& text_tokens, const UndConfig& cfg,
                            const PrunePlan* plan) {
    const std::size_t L = m.config.n_layers;
    const bool use_pruned_path = plan && plan->has_task(Task::Und) && cfg.r_p > 0.0;
    const HybridSwitch hybrid{cfg.tau, Task::Und, cfg.n_max};

    UndResult res;
    RunReport& report = res.report;
    report.task = "und";
    report.visual_kept = visual_tokens.size();

    const PrefillResult pre = prefill(m, visual_tokens, text_tokens, cfg, report);
    const std::size_t original_len = visual_tokens.size() + text_tokens.size();

    SkipState skip;
    skip.r_ls = cfg.r_ls;
    skip.t_ls = cfg.t_ls;
    skip.n_layers = L;
    skip.last_scores = pre.sims;  // seeds the state; first recalc step refreshes it

    std::vector<int> generated;
    for (int n = 1; n <= cfg.n_max; ++n) {
        const int step_idx = n - 1;
        const SkipQuery sq = step(skip, step_idx);
        ++report.steps;
        if (sq.is_recalc_step) {
            ++report.full_steps;
        } else {
            report.skipped_layer_executions += sq.active.size();
        }
        const FfnPath path = use_pruned_path
                                 ? select_path(hybrid, static_cast<double>(n))
                                 : FfnPath::Full;

        std::vector<int> seq = pre.layout.tokens;
        std::vector<std::size_t> pos = pre.layout.positions;
        for (std::size_t g = 0; g < generated.size(); ++g) {
            seq.push_back(generated[g]);
            pos.push_back(original_len + g);
        }
        Tensor h;
        {
            ScopedTimer timer(report, "trunk.embed");
            h = embed_with_positions(m, seq, pos);
        }
        std::vector<double> sims(L, 0.0);
        std::size_t next_skip = 0;
        for (std::size_t l = 0; l < L; ++l) {
            if (next_skip < sq.active.size() && sq.active[next_skip] == l) {
                ++next_skip;
                continue;
            }
            Tensor h_in;
            if (sq.is_recalc_step) h_in = h;
            {
                ScopedTimer timer(report, "trunk.attn");
                h = attn_sublayer(m, l, h, AttnMode::Causal, report.ledger);
            }
            {
                ScopedTimer timer(report, "trunk.ffn");
                h = ffn_sublayer(m, l, h, path, Task::Und, plan, report.ledger);
            }
            if (sq.is_recalc_step) sims[l] = sim_und(h_in, h);
        }
        Tensor logits;
        {
            ScopedTimer timer(report, "lm_head");
            const std::size_t d = m.config.d_model;
            const Tensor h_last({d}, std::vector<float>(h.data() + (h.rows() - 1) * d,
                                                        h.data() + h.size()));
            logits = lm_logits(m, h_last, report.ledger);
        }
        int best = 0;
        for (std::size_t t = 1; t < logits.size(); ++t) {
            if (logits[t] > logits[best]) best = static_cast<int>(t);
        }
        if (sq.is_recalc_step) {
            recalc(skip, sims);
            report.skip_audit.push_back({step_idx, sims, skip.skip_list});
        }
        if (best == cfg.eos_token) break;
        generated.push_back(best);
    }

    std::uint64_t checksum = fnv1a(nullptr, 0);
    if (!generated.empty()) checksum = fnv1a(generated.data(), generated.size() * sizeof(int));
    report.output_checksum = checksum;
    report.tokens = generated;
    res.tokens = std::move(generated);
    return res;
}

}  // namespace flashu
