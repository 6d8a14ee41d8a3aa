#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/model.hpp"
#include "flashu/plan.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

// Activation batches captured at one layer's FFN input (post rms-norm),
// one entry per layer.
struct CalibrationSet {
    Task task = Task::Gen;
    std::vector<std::vector<Tensor>> per_layer_samples;
    std::string source;

    void validate(std::size_t n_layers) const {
        if (per_layer_samples.size() != n_layers) {
            throw DataError("calibration set covers " + std::to_string(per_layer_samples.size()) +
                            " layers, model has " + std::to_string(n_layers));
        }
        for (const auto& samples : per_layer_samples) {
            if (samples.empty()) throw DataError("empty calibration set for a layer");
        }
    }
};

struct SensitivityScores {
    std::vector<std::vector<double>> wanda;  // per layer, length d_ffn
    std::vector<std::vector<double>> obd;    // per layer, length d_ffn
    Task task = Task::Gen;
    std::string method = "wanda";
};

namespace detail {

inline Tensor hidden_activations(const ModelBundle& m, std::size_t layer, const Tensor& x) {
    FlopLedger off;
    off.enabled = false;
    const TrunkLayer& l = m.layers.at(layer);
    Tensor h = matmul(x, l.w1, off, "calib");
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h.at(r, c) += l.b1[c];
    return silu(h);
}

}  // namespace detail

// Oracle: literally zero each hidden activation and re-run the output
// projection, averaging the squared reconstruction error over all rows.
inline std::vector<double> obd_score_brute(const ModelBundle& m, std::size_t layer,
                                           const std::vector<Tensor>& samples) {
    if (samples.empty()) throw DataError("obd_score_brute: empty calibration set");
    const TrunkLayer& l = m.layers.at(layer);
    const std::size_t dff = m.config.d_ffn, d = m.config.d_model;
    FlopLedger off;
    off.enabled = false;
    std::vector<double> scores(dff, 0.0);
    std::size_t total_rows = 0;
    for (const Tensor& x : samples) {
        const Tensor a = detail::hidden_activations(m, layer, x);
        const Tensor full = matmul(a, l.w2, off, "calib");
        total_rows += x.rows();
        for (std::size_t i = 0; i < dff; ++i) {
            Tensor az = a;
            for (std::size_t r = 0; r < az.rows(); ++r) az.at(r, i) = 0.0f;
            const Tensor zeroed = matmul(az, l.w2, off, "calib");
            for (std::size_t r = 0; r < x.rows(); ++r) {
                double err = 0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff =
                        static_cast<double>(full.at(r, c)) - static_cast<double>(zeroed.at(r, c));
                    err += diff * diff;
                }
                scores[i] += err;
            }
        }
    }
    for (double& s : scores) s /= static_cast<double>(total_rows);
    return scores;
}

// Closed form of the same score: zeroing neuron i changes the output by
// a_i * W2[:,i], so Delta_i = mean(a_i^2) * ||W2[:,i]||^2.
inline std::vector<double> obd_score_fast(const ModelBundle& m, std::size_t layer,
                                          const std::vector<Tensor>& samples) {
    if (samples.empty()) throw DataError("obd_score_fast: empty calibration set");
    const TrunkLayer& l = m.layers.at(layer);
    const std::size_t dff = m.config.d_ffn, d = m.config.d_model;
    std::vector<double> col_sq(dff, 0.0);
    for (std::size_t i = 0; i < dff; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            const double w = l.w2.at(i, c);
            col_sq[i] += w * w;
        }
    }
    std::vector<double> mean_sq(dff, 0.0);
    std::size_t total_rows = 0;
    for (const Tensor& x : samples) {
        const Tensor a = detail::hidden_activations(m, layer, x);
        total_rows += a.rows();
        for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t i = 0; i < dff; ++i) {
                const double v = a.at(r, i);
                mean_sq[i] += v * v;
            }
        }
    }
    std::vector<double> scores(dff);
    for (std::size_t i = 0; i < dff; ++i) {
        scores[i] = mean_sq[i] / static_cast<double>(total_rows) * col_sq[i];
    }
    return scores;
}

// I_j = ||a_j||_2 * sum_i |W2[i,j]| with the activation norm pooled over all
// calibration rows and divided by sqrt(rows) so the score is batch-size
// independent.
inline std::vector<double> wanda_score(const ModelBundle& m, std::size_t layer,
                                       const std::vector<Tensor>& samples) {
    if (samples.empty()) throw DataError("wanda_score: empty calibration set");
    const TrunkLayer& l = m.layers.at(layer);
    const std::size_t dff = m.config.d_ffn, d = m.config.d_model;
    std::vector<double> act_sq(dff, 0.0);
    std::size_t total_rows = 0;
    for (const Tensor& x : samples) {
        const Tensor a = detail::hidden_activations(m, layer, x);
        total_rows += a.rows();
        for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t j = 0; j < dff; ++j) {
                const double v = a.at(r, j);
                act_sq[j] += v * v;
            }
        }
    }
    std::vector<double> scores(dff);
    for (std::size_t j = 0; j < dff; ++j) {
        double abs_sum = 0;
        for (std::size_t c = 0; c < d; ++c) abs_sum += std::abs(l.w2.at(j, c));
        scores[j] = std::sqrt(act_sq[j] / static_cast<double>(total_rows)) * abs_sum;
    }
    return scores;
}

inline SensitivityScores score_all_layers(const ModelBundle& m, const CalibrationSet& calib) {
    calib.validate(m.config.n_layers);
    SensitivityScores out;
    out.task = calib.task;
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        out.wanda.push_back(wanda_score(m, l, calib.per_layer_samples[l]));
        out.obd.push_back(obd_score_fast(m, l, calib.per_layer_samples[l]));
    }
    return out;
}

// Mask out the floor(r_p * d_ffn) lowest-importance neurons per (task, layer).
inline PrunePlan build_plan(const std::map<Task, SensitivityScores>& scores_by_task, double r_p,
                            double tau) {
    if (r_p < 0.0 || r_p >= 1.0) throw ConfigError("prune ratio r_p must lie in [0,1)");
    if (tau < 0.0 || tau > 1.0) throw ConfigError("hybrid threshold tau must lie in [0,1]");
    PrunePlan plan;
    plan.r_p = r_p;
    plan.tau = tau;
    for (const auto& [task, scores] : scores_by_task) {
        std::vector<LayerMask> layers;
        for (const auto& layer_scores : scores.wanda) {
            const std::size_t dff = layer_scores.size();
            Tensor s({dff});
            for (std::size_t i = 0; i < dff; ++i) s[i] = static_cast<float>(layer_scores[i]);
            LayerMask mask;
            mask.keep.assign(dff, true);
            for (std::size_t idx :
                 topk_indices(s, masked_neuron_count(r_p, dff), TopkOrder::Smallest)) {
                mask.keep[idx] = false;
            }
            layers.push_back(std::move(mask));
        }
        plan.masks[task] = std::move(layers);
    }
    return plan;
}

struct SpecializationFractions {
    double gen_only = 0, und_only = 0, shared = 0;
};

// Top-50% rank sets by each task's score; fractions of the union that are
// generation-specific, understanding-specific, or shared.
inline SpecializationFractions specialization_report_layer(const std::vector<double>& delta_gen,
                                                           const std::vector<double>& delta_und) {
    if (delta_gen.size() != delta_und.size()) {
        throw DataError("specialization report: score length mismatch");
    }
    const std::size_t dff = delta_gen.size();
    const std::size_t half = (dff + 1) / 2;
    auto top_half = [&](const std::vector<double>& v) {
        Tensor s({dff});
        for (std::size_t i = 0; i < dff; ++i) s[i] = static_cast<float>(v[i]);
        std::vector<bool> in(dff, false);
        for (std::size_t idx : topk_indices(s, half, TopkOrder::Largest)) in[idx] = true;
        return in;
    };
    const std::vector<bool> g = top_half(delta_gen), u = top_half(delta_und);
    std::size_t only_g = 0, only_u = 0, both = 0, uni = 0;
    for (std::size_t i = 0; i < dff; ++i) {
        if (g[i] || u[i]) ++uni;
        if (g[i] && u[i]) ++both;
        else if (g[i]) ++only_g;
        else if (u[i]) ++only_u;
    }
    SpecializationFractions f;
    f.gen_only = static_cast<double>(only_g) / static_cast<double>(uni);
    f.und_only = static_cast<double>(only_u) / static_cast<double>(uni);
    f.shared = static_cast<double>(both) / static_cast<double>(uni);
    return f;
}

inline std::vector<SpecializationFractions> specialization_report(const SensitivityScores& gen,
                                                                  const SensitivityScores& und) {
    if (gen.obd.size() != und.obd.size()) {
        throw DataError("specialization report: layer count mismatch");
    }
    std::vector<SpecializationFractions> out;
    for (std::size_t l = 0; l < gen.obd.size(); ++l) {
        out.push_back(specialization_report_layer(gen.obd[l], und.obd[l]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Calibration gathering. Gen: FFN inputs recorded during one full baseline
// generation run (conditional branch). Und: N_calib seeded synthetic prompts
// through a plain causal forward.
// ---------------------------------------------------------------------------

inline std::vector<int> synthetic_prompt(std::uint64_t seed, std::size_t count,
                                         std::uint32_t vocab_size) {
    SplitMix64 rng(seed);
    std::vector<int> tokens(count);
    for (auto& t : tokens) t = static_cast<int>(rng.next_u64() % vocab_size);
    return tokens;
}

inline Tensor gaussian_latent(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    SplitMix64 rng(seed ^ 0xA5A5A5A5A5A5A5A5ULL);
    Tensor z({rows, cols});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.next_gaussian();
    return z;
}

// Runs one baseline (all mechanisms off) generation of T0 steps, capturing
// every layer's FFN input on the conditional branch.
inline CalibrationSet collect_gen_calibration(const ModelBundle& m, const std::vector<int>& prompt,
                                              int t0, double s0, std::uint64_t seed) {
    const std::size_t L = m.config.n_layers, d = m.config.d_model;
    const std::size_t n_img = m.config.n_img_tokens;
    CalibrationSet calib;
    calib.task = Task::Gen;
    calib.source = "baseline generation, T0=" + std::to_string(t0);
    calib.per_layer_samples.resize(L);
    FlopLedger off;
    off.enabled = false;
    Tensor z = gaussian_latent(seed, n_img, d);
    const std::vector<int> null_prompt(prompt.size(), 0);
    const float dt = 1.0f / static_cast<float>(t0);
    for (int k = 0; k < t0; ++k) {
        const float t_norm = static_cast<float>(t0 - k) / static_cast<float>(t0);
        Tensor v_cond, v_uncond;
        for (int branch = 0; branch < 2; ++branch) {
            const std::vector<int>& cond = branch == 0 ? prompt : null_prompt;
            Tensor h({cond.size() + n_img, d});
            const Tensor text = embed_with_positions(m, cond);
            std::copy(text.data(), text.data() + text.size(), h.data());
            for (std::size_t r = 0; r < n_img; ++r) {
                const Tensor pos = position_embedding(cond.size() + r, d);
                for (std::size_t c = 0; c < d; ++c) {
                    h.at(cond.size() + r, c) = z.at(r, c) + pos[c];
                }
            }
            for (std::size_t l = 0; l < L; ++l) {
                const Tensor y = attn_sublayer(m, l, h, AttnMode::Full, off);
                const Tensor yn = rms_norm(y, m.layers[l].gain_ffn);
                if (branch == 0) calib.per_layer_samples[l].push_back(yn);
                h = add(y, ffn_full(m, l, yn, off));
            }
            Tensor h_img({n_img, d});
            std::copy(h.data() + cond.size() * d, h.data() + h.size(), h_img.data());
            const HeadOutput head = diffusion_head(m, h_img, t_norm, off);
            (branch == 0 ? v_cond : v_uncond) = head.velocity;
        }
        Tensor v = v_uncond;
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] += static_cast<float>(s0) * (v_cond[i] - v_uncond[i]);
        }
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += dt * v[i];
    }
    return calib;
}

// N_calib seeded prompts, each [visual tokens || text tokens], plain causal
// forward with the full FFN path.
inline CalibrationSet collect_und_calibration(const ModelBundle& m, int n_calib,
                                              std::size_t n_text, std::uint64_t seed) {
    if (n_calib < 1) throw DataError("understanding calibration needs at least one sample");
    const std::size_t L = m.config.n_layers;
    CalibrationSet calib;
    calib.task = Task::Und;
    calib.source = "synthetic prompts, N_calib=" + std::to_string(n_calib);
    calib.per_layer_samples.resize(L);
    FlopLedger off;
    off.enabled = false;
    for (int s = 0; s < n_calib; ++s) {
        std::vector<int> tokens = synthetic_prompt(seed + static_cast<std::uint64_t>(s),
                                                   m.config.n_img_tokens + n_text,
                                                   m.config.vocab_size);
        Tensor h = embed_with_positions(m, tokens);
        for (std::size_t l = 0; l < L; ++l) {
            const Tensor y = attn_sublayer(m, l, h, AttnMode::Causal, off);
            const Tensor yn = rms_norm(y, m.layers[l].gain_ffn);
            calib.per_layer_samples[l].push_back(yn);
            h = add(y, ffn_full(m, l, yn, off));
        }
    }
    return calib;
}

// Scores file: {"task", "d_ffn", "layers": [{"wanda": [...], "obd": [...]}]}.
inline nlohmann::json scores_to_json(const SensitivityScores& s) {
    nlohmann::json j;
    j["task"] = task_name(s.task);
    j["d_ffn"] = s.wanda.empty() ? 0 : s.wanda[0].size();
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < s.wanda.size(); ++l) {
        layers.push_back({{"wanda", s.wanda[l]}, {"obd", s.obd[l]}});
    }
    j["layers"] = layers;
    return j;
}

inline SensitivityScores scores_from_json(const nlohmann::json& j) {
    SensitivityScores s;
    const std::string task = j.at("task").get<std::string>();
    if (task == "gen") s.task = Task::Gen;
    else if (task == "und") s.task = Task::Und;
    else throw FormatError("scores file has unknown task tag: " + task);
    for (const auto& jl : j.at("layers")) {
        s.wanda.push_back(jl.at("wanda").get<std::vector<double>>());
        s.obd.push_back(jl.at("obd").get<std::vector<double>>());
    }
    return s;
}

}  // namespace flashu
