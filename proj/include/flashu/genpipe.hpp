#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/layerskip.hpp"
#include "flashu/model.hpp"
#include "flashu/plan.hpp"
#include "flashu/report.hpp"
#include "flashu/sensitivity.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

// Two-regime ascending guidance schedule over normalized noise time.
struct GuidanceSchedule {
    double s_low = 3.75;
    double s_high = 5.0;
    double t_switch_frac = 0.3;
};

// s(t) = s_low for t > t_switch, s_high for t <= t_switch. The boundary
// belongs to the high-gain regime.
inline double guidance_scale(const GuidanceSchedule& sched, double t_norm) {
    return t_norm > sched.t_switch_frac ? sched.s_low : sched.s_high;
}

inline Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double s) {
    if (!v_cond.same_shape(v_uncond)) {
        throw DimensionError("cfg_combine shape mismatch: " + v_cond.shape_str() + " vs " +
                             v_uncond.shape_str());
    }
    Tensor out = v_uncond;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += static_cast<float>(s) * (v_cond[i] - v_uncond[i]);
    }
    return out;
}

inline Tensor euler_step(const Tensor& z, const Tensor& velocity, float dt) {
    if (!z.same_shape(velocity)) {
        throw DimensionError("euler_step shape mismatch: " + z.shape_str() + " vs " +
                             velocity.shape_str());
    }
    Tensor out = z;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += dt * velocity[i];
    return out;
}

// Diffusion-head cache for one guidance branch. Miss steps (step mod T_cache
// == 0) run the full head and store the pre-final hidden state; hit steps
// re-apply only the time-independent final projection.
struct HeadCache {
    int t_cache = 5;
    std::optional<Tensor> cached_pre_final;
    int hits = 0;
    int misses = 0;
};

inline Tensor head_eval(HeadCache& cache, const ModelBundle& m, const Tensor& h_img, float t_norm,
                        int step_idx, FlopLedger& ledger) {
    if (step_idx < 0) throw DomainError("head_eval: step index must be >= 0");
    if (cache.t_cache < 1) throw ConfigError("head cache interval must be >= 1");
    if (step_idx % cache.t_cache == 0) {
        const HeadOutput out = diffusion_head(m, h_img, t_norm, ledger);
        cache.cached_pre_final = out.pre_final;
        ++cache.misses;
        return out.velocity;
    }
    if (!cache.cached_pre_final) {
        throw DataError("head cache hit with no cached state (internal invariant violation)");
    }
    ++cache.hits;
    return head_final_projection(m, *cache.cached_pre_final, ledger);
}

struct GenConfig {
    int t_steps = 35;       // T
    int t0 = 50;            // baseline step count, for reporting only
    double tau = 0.3;
    double r_p = 0.2;
    double r_ls = 0.2;
    int t_ls = 10;
    int t_cache = 5;
    GuidanceSchedule sched;
    std::uint64_t seed = 0;
};

struct GenResult {
    Tensor latent;
    RunReport report;
};

// Pathway A: iterative Euler denoising with classifier-free guidance,
// hybrid FFN, layer skipping, and head caching. The unconditional branch
// replaces the prompt with null tokens of the same length; skip decisions
// come from the conditional branch and apply to both.
inline GenResult generate(const ModelBundle& m, const std::vector<int>& prompt,
                          const GenConfig& cfg, const PrunePlan* plan) {
    if (prompt.empty()) throw DataError("generation prompt must be nonempty");
    if (cfg.t_steps < 1) throw ConfigError("generation needs at least one step");
    const std::size_t L = m.config.n_layers, d = m.config.d_model;
    const std::size_t n_img = m.config.n_img_tokens;
    const std::size_t n_cond = prompt.size();

    const bool use_pruned_path = plan && plan->has_task(Task::Gen) && cfg.r_p > 0.0;
    const HybridSwitch hybrid{cfg.tau, Task::Gen, 0};

    GenResult res;
    RunReport& report = res.report;
    report.task = "gen";
    report.steps = cfg.t_steps;

    SkipState skip;
    skip.r_ls = cfg.r_ls;
    skip.t_ls = cfg.t_ls;
    skip.n_layers = L;
    HeadCache cache_cond{cfg.t_cache}, cache_uncond{cfg.t_cache};

    Tensor z = gaussian_latent(cfg.seed, n_img, d);
    const std::vector<int> null_prompt(n_cond, 0);
    const float dt = 1.0f / static_cast<float>(cfg.t_steps);

    for (int k = 0; k < cfg.t_steps; ++k) {
        const float t_norm =
            static_cast<float>(cfg.t_steps - k) / static_cast<float>(cfg.t_steps);
        const SkipQuery sq = step(skip, k);
        if (sq.is_recalc_step) {
            ++report.full_steps;
        } else {
            report.skipped_layer_executions += sq.active.size();
        }
        const double s = guidance_scale(cfg.sched, t_norm);
        report.guidance_trace.push_back(s);
        const FfnPath path =
            use_pruned_path ? select_path(hybrid, t_norm) : FfnPath::Full;

        std::vector<double> sims(L, 0.0);
        Tensor v_cond, v_uncond;
        for (int branch = 0; branch < 2; ++branch) {
            const std::vector<int>& cond = branch == 0 ? prompt : null_prompt;
            Tensor h({n_cond + n_img, d});
            {
                ScopedTimer timer(report, "trunk.embed");
                const Tensor text = embed_with_positions(m, cond);
                std::copy(text.data(), text.data() + text.size(), h.data());
                for (std::size_t r = 0; r < n_img; ++r) {
                    const Tensor pos = position_embedding(n_cond + r, d);
                    for (std::size_t c = 0; c < d; ++c) h.at(n_cond + r, c) = z.at(r, c) + pos[c];
                }
            }
            std::size_t next_skip = 0;
            for (std::size_t l = 0; l < L; ++l) {
                if (next_skip < sq.active.size() && sq.active[next_skip] == l) {
                    ++next_skip;
                    continue;  // skipped layer: identity on the hidden state
                }
                Tensor h_in;
                if (sq.is_recalc_step && branch == 0) h_in = h;
                {
                    ScopedTimer timer(report, "trunk.attn");
                    h = attn_sublayer(m, l, h, AttnMode::Full, report.ledger);
                }
                {
                    ScopedTimer timer(report, "trunk.ffn");
                    h = ffn_sublayer(m, l, h, path, Task::Gen, plan, report.ledger);
                }
                if (sq.is_recalc_step && branch == 0) sims[l] = sim_gen(h_in, h);
            }
            Tensor h_img({n_img, d});
            std::copy(h.data() + n_cond * d, h.data() + h.size(), h_img.data());
            Tensor v;
            {
                ScopedTimer timer(report, "diff_head");
                v = head_eval(branch == 0 ? cache_cond : cache_uncond, m, h_img, t_norm, k,
                              report.ledger);
            }
            (branch == 0 ? v_cond : v_uncond) = std::move(v);
        }
        const Tensor v = cfg_combine(v_cond, v_uncond, s);
        z = euler_step(z, v, dt);
        if (!z.all_finite()) {
            throw DataError("latent diverged at generation step " + std::to_string(k));
        }
        if (sq.is_recalc_step) {
            recalc(skip, sims);
            report.skip_audit.push_back({k, sims, skip.skip_list});
        }
    }

    report.cache_cond = {cache_cond.hits, cache_cond.misses};
    report.cache_uncond = {cache_uncond.hits, cache_uncond.misses};
    report.output_checksum = z.checksum();
    res.latent = std::move(z);
    return res;
}

}  // namespace flashu
