#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

// Per-run dynamic layer-skip state. Steps whose index is a multiple of T_LS
// run every layer and re-measure similarity; the resulting skip list is
// cached for the following T_LS - 1 steps.
struct SkipState {
    double r_ls = 0.0;
    int t_ls = 10;
    std::size_t n_layers = 0;
    std::vector<std::size_t> skip_list;  // sorted ascending
    std::vector<double> last_scores;
    int step_counter = 0;

    std::size_t target_size() const {
        return static_cast<std::size_t>(
            std::ceil(r_ls * static_cast<double>(n_layers)) + 0.0);
    }
};

// Mean over token rows of the per-row input/output cosine similarity.
inline double sim_gen(const Tensor& h_in, const Tensor& h_out) {
    if (!h_in.same_shape(h_out)) {
        throw DimensionError("sim_gen shape mismatch: " + h_in.shape_str() + " vs " +
                             h_out.shape_str());
    }
    const std::size_t n = h_in.rows(), d = h_in.cols();
    double sum = 0;
    for (std::size_t r = 0; r < n; ++r) {
        sum += cosine_sim(h_in.data() + r * d, h_out.data() + r * d, d);
    }
    return sum / static_cast<double>(n);
}

// Cosine similarity of the final-position hidden state only.
inline double sim_und(const Tensor& h_in, const Tensor& h_out) {
    if (!h_in.same_shape(h_out)) {
        throw DimensionError("sim_und shape mismatch: " + h_in.shape_str() + " vs " +
                             h_out.shape_str());
    }
    const std::size_t d = h_in.cols();
    const std::size_t last = h_in.rows() - 1;
    return cosine_sim(h_in.data() + last * d, h_out.data() + last * d, d);
}

// Rebuild the skip list from fresh per-layer scores: the ceil(r_LS * L)
// highest-similarity layers, ties toward the lower index.
inline void recalc(SkipState& state, const std::vector<double>& scores) {
    if (scores.size() != state.n_layers) {
        throw DimensionError("recalc: expected " + std::to_string(state.n_layers) +
                             " scores, got " + std::to_string(scores.size()));
    }
    Tensor s({scores.size()});
    for (std::size_t i = 0; i < scores.size(); ++i) s[i] = static_cast<float>(scores[i]);
    state.skip_list = topk_indices(s, state.target_size(), TopkOrder::Largest);
    state.last_scores = scores;
}

struct SkipQuery {
    bool is_recalc_step;
    std::vector<std::size_t> active;  // layers to bypass this step
};

// Step 0 is always a full-computation step. On recalc steps all layers run
// so similarity can be measured; otherwise the cached list applies.
inline SkipQuery step(SkipState& state, int step_idx) {
    if (step_idx < 0) throw DomainError("skip step index must be >= 0");
    state.step_counter = step_idx;
    const bool is_recalc = state.t_ls > 0 && step_idx % state.t_ls == 0;
    if (is_recalc) return {true, {}};
    return {false, state.skip_list};
}

}  // namespace flashu
