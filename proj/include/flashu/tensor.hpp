#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flashu/common.hpp"

namespace flashu {

// Cumulative multiply-accumulate FLOP counters keyed by component label.
// A matmul of shapes (m x k)(k x n) adds exactly 2*m*k*n to its label.
// Elementwise and normalization ops are deliberately not counted.
struct FlopLedger {
    std::map<std::string, std::uint64_t> counters;
    bool enabled = true;

    void add(const std::string& label, std::uint64_t flops) {
        if (enabled) counters[label] += flops;
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& [k, v] : counters) t += v;
        return t;
    }

    std::uint64_t get(const std::string& label) const {
        auto it = counters.find(label);
        return it == counters.end() ? 0 : it->second;
    }
};

// Dense row-major f32 tensor; single allocation, no views.
// Immutable after construction by convention (pipelines copy, never alias).
class Tensor {
  public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, float fill = 0.0f)
        : shape_(std::move(shape)), data_(count_(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count_(shape_)) {
            throw DimensionError("tensor data length does not match shape product");
        }
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<float> data) {
        return Tensor({r, c}, std::move(data));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::size_t rows() const { return rank() == 1 ? 1 : shape_[0]; }
    std::size_t cols() const { return rank() == 1 ? shape_[0] : shape_[1]; }

    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    const std::vector<float>& vec() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << ")";
        return os.str();
    }

    std::uint64_t checksum() const {
        std::uint64_t h = fnv1a(shape_.data(), shape_.size() * sizeof(std::size_t));
        return fnv1a(data_.data(), data_.size() * sizeof(float), h);
    }

    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    static std::size_t count_(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw DimensionError("zero tensor dimension");
            n *= d;
        }
        return s.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

inline Tensor matmul(const Tensor& a, const Tensor& b, FlopLedger& ledger,
                     const std::string& label) {
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw DimensionError("matmul dimension mismatch: " + a.shape_str() + " * " + b.shape_str());
    }
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const float aij = a.at(i, j);
            const float* brow = b.data() + j * n;
            float* orow = out.data() + i * n;
            for (std::size_t c = 0; c < n; ++c) orow[c] += aij * brow[c];
        }
    }
    ledger.add(label, 2ULL * m * k * n);
    assert(out.all_finite());
    return out;
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

inline double cosine_sim(const float* a, const float* b, std::size_t d) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) throw DataError("cosine_sim: degenerate vector");
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

inline double cosine_sim(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) {
        throw DimensionError("cosine_sim length mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    return cosine_sim(a.data(), b.data(), a.size());
}

inline Tensor row_l2_norms(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const float v = x.at(i, j);
            s += static_cast<double>(v) * v;
        }
        out[i] = static_cast<float>(std::sqrt(s));
    }
    return out;
}

enum class TopkOrder { Largest, Smallest };

// Indices of the k extreme scores. Ties break toward the smaller index;
// the result is sorted ascending by index.
inline std::vector<std::size_t> topk_indices(const Tensor& scores, std::size_t k, TopkOrder order) {
    const std::size_t n = scores.size();
    if (k > n) throw DimensionError("topk_indices: k exceeds score count");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return order == TopkOrder::Largest ? scores[a] > scores[b] : scores[a] < scores[b];
        }
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        float mx = x.at(i, 0);
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x.at(i, j));
        float sum = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const float e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        const float inv = 1.0f / sum;
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= inv;
    }
    assert(out.all_finite());
    return out;
}

inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.size() != d) {
        throw DimensionError("rms_norm gain length mismatch: " + gain.shape_str());
    }
    constexpr float kEps = 1e-6f;
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        float ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += x.at(i, j) * x.at(i, j);
        const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + kEps);
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * inv * gain[j];
    }
    assert(out.all_finite());
    return out;
}

inline float silu_scalar(float v) { return v / (1.0f + std::exp(-v)); }

inline Tensor silu(const Tensor& x) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu_scalar(out[i]);
    return out;
}

}  // namespace flashu
