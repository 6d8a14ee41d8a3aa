#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

// Token bookkeeping for the understanding sequence. Positions are the
// original embedding positions; they survive pruning unchanged so tokens
// keep their positional identity.
struct SequenceLayout {
    std::size_t visual_begin = 0;
    std::size_t visual_end = 0;  // half-open
    std::vector<int> tokens;
    std::vector<std::size_t> positions;

    std::size_t visual_count() const { return visual_end - visual_begin; }
};

struct TokenPruneConfig {
    double rho = 0.0;
    std::size_t l_prune = 2;
};

// Per-visual-token L2 norm of the concatenated-head value vector.
inline Tensor vnorm_scores(const Tensor& values, std::size_t visual_begin,
                           std::size_t visual_end) {
    if (visual_end <= visual_begin || visual_end > values.rows()) {
        throw ConfigError("vnorm_scores: empty or out-of-range visual range");
    }
    const std::size_t d = values.cols();
    Tensor out({visual_end - visual_begin});
    for (std::size_t i = visual_begin; i < visual_end; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const float v = values.at(i, j);
            s += static_cast<double>(v) * v;
        }
        out[i - visual_begin] = static_cast<float>(std::sqrt(s));
    }
    return out;
}

// The ceil(rho * |X_v|) visual tokens with the LARGEST v-norms are pruned
// (high v-norm correlates with low attention importance). Returned indices
// are relative to the visual range, sorted ascending.
inline std::vector<std::size_t> select_pruned(const Tensor& scores, double rho) {
    if (rho < 0.0 || rho >= 1.0) throw ConfigError("token prune ratio must lie in [0,1)");
    const std::size_t k =
        static_cast<std::size_t>(std::ceil(rho * static_cast<double>(scores.size())));
    return topk_indices(scores, k, TopkOrder::Largest);
}

// Remove the pruned visual rows from the hidden state and layout. Text and
// response positions are never prunable.
inline Tensor apply_prune(const Tensor& hidden, const std::vector<std::size_t>& pruned_rel,
                          SequenceLayout& layout) {
    const std::size_t n = hidden.rows(), d = hidden.cols();
    std::vector<bool> drop(n, false);
    for (std::size_t rel : pruned_rel) {
        const std::size_t abs = layout.visual_begin + rel;
        if (abs >= layout.visual_end) {
            throw DataError("apply_prune: index " + std::to_string(abs) +
                            " outside the visual range");
        }
        drop[abs] = true;
    }
    Tensor out({n - pruned_rel.size(), d});
    std::vector<int> tokens;
    std::vector<std::size_t> positions;
    std::size_t w = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (drop[r]) continue;
        std::copy(hidden.data() + r * d, hidden.data() + (r + 1) * d, out.data() + w * d);
        tokens.push_back(layout.tokens[r]);
        positions.push_back(layout.positions[r]);
        ++w;
    }
    layout.visual_end -= pruned_rel.size();
    layout.tokens = std::move(tokens);
    layout.positions = std::move(positions);
    return out;
}

}  // namespace flashu
