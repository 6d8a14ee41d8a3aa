#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "flashu/common.hpp"
#include "flashu/plan.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

struct ModelConfig {
    std::uint32_t n_layers = 8;
    std::uint32_t d_model = 64;
    std::uint32_t d_ffn = 256;
    std::uint32_t n_heads = 4;
    std::uint32_t vocab_size = 256;
    std::uint32_t n_img_tokens = 64;  // 8x8 latent grid
    std::uint32_t n_head_layers = 4;  // diffusion head depth
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || d_ffn < 1 || n_heads < 1 || vocab_size < 1 ||
            n_img_tokens < 1 || n_head_layers < 1) {
            throw ConfigError("model config dimensions must all be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model must be divisible by n_heads");
        }
    }
};

struct TrunkLayer {
    Tensor wq, wk, wv, wo;   // d_model x d_model each
    Tensor w1, b1, w2, b2;   // d_model x d_ffn, d_ffn, d_ffn x d_model, d_model
    Tensor gain_attn, gain_ffn;  // d_model
};

struct HeadLayer {
    Tensor w;     // d_model x d_model
    Tensor gain;  // d_model
};

enum class AttnMode { Full, Causal };

// Toy unified transformer weights. Read-only after init/load; shared freely
// across concurrent runs.
struct ModelBundle {
    ModelConfig config;
    Tensor embeddings;  // vocab_size x d_model
    std::vector<TrunkLayer> layers;
    std::vector<HeadLayer> head_layers;
    Tensor head_out;  // d_model x d_model
    Tensor lm_head;   // d_model x vocab_size
};

namespace detail {

inline Tensor draw_uniform(SplitMix64& rng, std::size_t rows, std::size_t cols) {
    const float a = std::sqrt(6.0f / static_cast<float>(rows + cols));
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_uniform(-a, a);
    return t;
}

}  // namespace detail

// Deterministic initialization: uniform [-a, a] with a = sqrt(6/(fan_in+fan_out)),
// biases zero, rms gains one. Field order (also the FLSU serialization order):
// embeddings; layers 0..L-1 each as wq, wk, wv, wo, w1, b1, w2, b2, gain_attn,
// gain_ffn (biases and gains are constant-initialized, only matrices consume
// draws); diffusion head layers 0..n_head_layers-1 as (w, gain); head output
// projection; lm head.
inline ModelBundle init_model(const ModelConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);
    ModelBundle m;
    m.config = config;
    const std::size_t d = config.d_model, dff = config.d_ffn, v = config.vocab_size;
    m.embeddings = detail::draw_uniform(rng, v, d);
    m.layers.resize(config.n_layers);
    for (auto& l : m.layers) {
        l.wq = detail::draw_uniform(rng, d, d);
        l.wk = detail::draw_uniform(rng, d, d);
        l.wv = detail::draw_uniform(rng, d, d);
        l.wo = detail::draw_uniform(rng, d, d);
        l.w1 = detail::draw_uniform(rng, d, dff);
        l.b1 = Tensor({dff}, 0.0f);
        l.w2 = detail::draw_uniform(rng, dff, d);
        l.b2 = Tensor({d}, 0.0f);
        l.gain_attn = Tensor({d}, 1.0f);
        l.gain_ffn = Tensor({d}, 1.0f);
    }
    m.head_layers.resize(config.n_head_layers);
    for (auto& h : m.head_layers) {
        h.w = detail::draw_uniform(rng, d, d);
        h.gain = Tensor({d}, 1.0f);
    }
    m.head_out = detail::draw_uniform(rng, d, d);
    m.lm_head = detail::draw_uniform(rng, d, v);
    return m;
}

// Sinusoidal ladder with base 10000, shared by positions and timesteps.
inline void sinusoid_into(float* dst, std::size_t d, float pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
        const float freq = std::pow(10000.0f, -2.0f * static_cast<float>(i) / static_cast<float>(d));
        dst[2 * i] = std::sin(pos * freq);
        dst[2 * i + 1] = std::cos(pos * freq);
    }
    if (d % 2 == 1) dst[d - 1] = std::sin(pos * std::pow(10000.0f, -1.0f));
}

inline Tensor position_embedding(std::size_t pos_index, std::size_t d) {
    Tensor t({d});
    sinusoid_into(t.data(), d, static_cast<float>(pos_index));
    return t;
}

inline Tensor timestep_embedding(float t_norm, std::size_t d) {
    Tensor t({d});
    sinusoid_into(t.data(), d, t_norm * 1000.0f);
    return t;
}

// Pure token embedding lookup, one row per token.
inline Tensor embed(const ModelBundle& m, const std::vector<int>& tokens) {
    const std::size_t d = m.config.d_model;
    Tensor out({tokens.size(), d});
    for (std::size_t r = 0; r < tokens.size(); ++r) {
        const int tok = tokens[r];
        if (tok < 0 || static_cast<std::uint32_t>(tok) >= m.config.vocab_size) {
            throw DataError("embed: token id out of range: " + std::to_string(tok));
        }
        std::memcpy(out.data() + r * d, m.embeddings.data() + static_cast<std::size_t>(tok) * d,
                    d * sizeof(float));
    }
    return out;
}

// Adds absolute sinusoidal positions in place. Positions are passed
// explicitly so pruned sequences keep their original positional identity.
inline void add_positions(Tensor& h, const std::vector<std::size_t>& positions) {
    if (h.rows() != positions.size()) {
        throw DimensionError("add_positions: row/position count mismatch");
    }
    const std::size_t d = h.cols();
    for (std::size_t r = 0; r < h.rows(); ++r) {
        const Tensor pos = position_embedding(positions[r], d);
        for (std::size_t j = 0; j < d; ++j) h.at(r, j) += pos[j];
    }
}

inline Tensor embed_with_positions(const ModelBundle& m, const std::vector<int>& tokens,
                                   const std::vector<std::size_t>& positions) {
    Tensor h = embed(m, tokens);
    add_positions(h, positions);
    return h;
}

inline Tensor embed_with_positions(const ModelBundle& m, const std::vector<int>& tokens) {
    std::vector<std::size_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    return embed_with_positions(m, tokens, pos);
}

// Optional observation points inside the attention sublayer; filling them
// never changes the computation.
struct AttnCapture {
    Tensor values;     // concatenated-head V, n x d_model
    Tensor attn_mass;  // attention mass received per position, length n
    bool want_mass = false;
};

// Pre-norm residual attention: x + O(softmax(QK^T / sqrt(dh)) V) on rms(x).
// Causal mode masks logits strictly above the diagonal.
inline Tensor attn_sublayer(const ModelBundle& m, std::size_t layer, const Tensor& x,
                            AttnMode mode, FlopLedger& ledger, AttnCapture* capture = nullptr) {
    const TrunkLayer& l = m.layers.at(layer);
    const std::size_t n = x.rows(), d = m.config.d_model, heads = m.config.n_heads;
    const std::size_t dh = d / heads;
    const Tensor xn = rms_norm(x, l.gain_attn);
    const Tensor q = matmul(xn, l.wq, ledger, "trunk.attn");
    const Tensor k = matmul(xn, l.wk, ledger, "trunk.attn");
    const Tensor v = matmul(xn, l.wv, ledger, "trunk.attn");
    if (capture) {
        capture->values = v;
        if (capture->want_mass) capture->attn_mass = Tensor({n}, 0.0f);
    }
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor mixed({n, d});
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh({n, dh}), kht({dh, n}), vh({n, dh});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < dh; ++j) {
                qh.at(i, j) = q.at(i, h * dh + j);
                kht.at(j, i) = k.at(i, h * dh + j);
                vh.at(i, j) = v.at(i, h * dh + j);
            }
        }
        Tensor logits = matmul(qh, kht, ledger, "trunk.attn");
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (mode == AttnMode::Causal && j > i) {
                    logits.at(i, j) = -std::numeric_limits<float>::infinity();
                } else {
                    logits.at(i, j) *= inv_sqrt;
                }
            }
        }
        const Tensor attn = softmax_rows(logits);
        if (capture && capture->want_mass) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) capture->attn_mass[j] += attn.at(i, j);
        }
        const Tensor oh = matmul(attn, vh, ledger, "trunk.attn");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dh; ++j) mixed.at(i, h * dh + j) = oh.at(i, j);
    }
    const Tensor out = matmul(mixed, l.wo, ledger, "trunk.attn");
    return add(x, out);
}

// FFN on an already-normalized input: W2 silu(W1 x + b1) + b2.
inline Tensor ffn_full(const ModelBundle& m, std::size_t layer, const Tensor& x,
                       FlopLedger& ledger) {
    const TrunkLayer& l = m.layers.at(layer);
    Tensor h = matmul(x, l.w1, ledger, "trunk.ffn");
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h.at(r, c) += l.b1[c];
    h = silu(h);
    Tensor out = matmul(h, l.w2, ledger, "trunk.ffn");
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += l.b2[c];
    return out;
}

// Pruned path: the hidden activation is masked elementwise before the W2
// projection. The ledger models the compacted kernel, so FLOPs are logged
// analytically as 2*n*d_model*d_ffn_kept*2 instead of the executed full width.
inline Tensor ffn_pruned(const ModelBundle& m, std::size_t layer, const Tensor& x, Task task,
                         const PrunePlan& plan, FlopLedger& ledger) {
    const TrunkLayer& l = m.layers.at(layer);
    const LayerMask& mask = plan.mask(task, layer);
    const std::size_t kept = mask.kept_count();
    const bool was_enabled = ledger.enabled;
    ledger.enabled = false;
    Tensor h = matmul(x, l.w1, ledger, "trunk.ffn");
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h.at(r, c) += l.b1[c];
    h = silu(h);
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h.at(r, c) *= mask.keep[c] ? 1.0f : 0.0f;
    Tensor out = matmul(h, l.w2, ledger, "trunk.ffn");
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += l.b2[c];
    ledger.enabled = was_enabled;
    ledger.add("trunk.ffn", 4ULL * x.rows() * m.config.d_model * kept);
    return out;
}

inline Tensor ffn_sublayer(const ModelBundle& m, std::size_t layer, const Tensor& y, FfnPath path,
                           Task task, const PrunePlan* plan, FlopLedger& ledger) {
    const Tensor yn = rms_norm(y, m.layers.at(layer).gain_ffn);
    if (path == FfnPath::Pruned) {
        if (!plan) throw ConfigError("pruned FFN path requested without a prune plan");
        return add(y, ffn_pruned(m, layer, yn, task, *plan, ledger));
    }
    return add(y, ffn_full(m, layer, yn, ledger));
}

// One pre-norm residual trunk block: x + Attn(rms(x)), then y + FFN(rms(y)).
inline Tensor trunk_block(const ModelBundle& m, std::size_t layer, const Tensor& x, AttnMode mode,
                          FfnPath path, Task task, const PrunePlan* plan, FlopLedger& ledger,
                          AttnCapture* capture = nullptr) {
    const Tensor y = attn_sublayer(m, layer, x, mode, ledger, capture);
    return ffn_sublayer(m, layer, y, path, task, plan, ledger);
}

struct HeadOutput {
    Tensor velocity;   // n_img x d_model
    Tensor pre_final;  // hidden state before the final projection (the cacheable state)
};

// Diffusion velocity head: additive sinusoidal timestep conditioning, then
// n_head_layers residual linear+rms blocks, then the final projection.
inline HeadOutput diffusion_head(const ModelBundle& m, const Tensor& h_img, float t_norm,
                                 FlopLedger& ledger) {
    if (!(t_norm > 0.0f && t_norm <= 1.0f)) {
        throw DomainError("diffusion_head: t_norm must lie in (0,1], got " + std::to_string(t_norm));
    }
    const std::size_t d = m.config.d_model;
    const Tensor temb = timestep_embedding(t_norm, d);
    Tensor h = h_img;
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) h.at(r, c) += temb[c];
    for (const HeadLayer& hl : m.head_layers) {
        const Tensor hn = rms_norm(h, hl.gain);
        h = add(h, matmul(hn, hl.w, ledger, "diff_head"));
    }
    HeadOutput out;
    out.pre_final = h;
    out.velocity = matmul(h, m.head_out, ledger, "diff_head");
    return out;
}

inline Tensor head_final_projection(const ModelBundle& m, const Tensor& pre_final,
                                    FlopLedger& ledger) {
    return matmul(pre_final, m.head_out, ledger, "diff_head");
}

inline Tensor lm_logits(const ModelBundle& m, const Tensor& h_last, FlopLedger& ledger) {
    if (h_last.size() != m.config.d_model) {
        throw DimensionError("lm_logits expects a d_model vector, got " + h_last.shape_str());
    }
    const Tensor row({std::size_t(1), static_cast<std::size_t>(m.config.d_model)}, h_last.vec());
    Tensor logits = matmul(row, m.lm_head, ledger, "lm_head");
    return Tensor({static_cast<std::size_t>(m.config.vocab_size)}, logits.vec());
}

// ---------------------------------------------------------------------------
// FLSU binary weight format: magic "FLSU", u32 LE version = 1, seven u32 LE
// config fields, u64 LE seed, then each drawn tensor as
// (u32 rank, u32 dims..., f32 LE data) in the documented draw order.
// ---------------------------------------------------------------------------

namespace flsu {

constexpr char kMagic[4] = {'F', 'L', 'S', 'U'};
constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t read_u32(std::istream& is, std::size_t& offset) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError("truncated FLSU file at byte offset " + std::to_string(offset));
    }
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is, std::size_t& offset) {
    const std::uint64_t lo = read_u32(is, offset);
    const std::uint64_t hi = read_u32(is, offset);
    return lo | (hi << 32);
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
}

inline Tensor read_tensor(std::istream& is, std::size_t& offset) {
    const std::uint32_t rank = read_u32(is, offset);
    if (rank == 0 || rank > 4) {
        throw FormatError("bad tensor rank " + std::to_string(rank) + " at byte offset " +
                          std::to_string(offset - 4));
    }
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = read_u32(is, offset);
        if (d == 0 || d > (1u << 24)) {
            throw FormatError("bad tensor dimension at byte offset " + std::to_string(offset - 4));
        }
        count *= d;
    }
    std::vector<float> data(count);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(count * sizeof(float)))) {
        throw FormatError("truncated tensor data at byte offset " + std::to_string(offset));
    }
    offset += count * sizeof(float);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace flsu

inline void for_each_drawn_tensor(const ModelBundle& m, const auto& fn) {
    fn(m.embeddings);
    for (const auto& l : m.layers) {
        fn(l.wq);
        fn(l.wk);
        fn(l.wv);
        fn(l.wo);
        fn(l.w1);
        fn(l.b1);
        fn(l.w2);
        fn(l.b2);
        fn(l.gain_attn);
        fn(l.gain_ffn);
    }
    for (const auto& h : m.head_layers) {
        fn(h.w);
        fn(h.gain);
    }
    fn(m.head_out);
    fn(m.lm_head);
}

inline void save_model(const ModelBundle& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open model file for writing: " + path);
    os.write(flsu::kMagic, 4);
    flsu::write_u32(os, flsu::kVersion);
    const ModelConfig& c = m.config;
    for (std::uint32_t v : {c.n_layers, c.d_model, c.d_ffn, c.n_heads, c.vocab_size,
                            c.n_img_tokens, c.n_head_layers}) {
        flsu::write_u32(os, v);
    }
    flsu::write_u64(os, c.seed);
    for_each_drawn_tensor(m, [&](const Tensor& t) { flsu::write_tensor(os, t); });
    if (!os) throw DataError("write failure on model file: " + path);
}

inline ModelBundle load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open model file: " + path);
    std::size_t offset = 0;
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, flsu::kMagic, 4) != 0) {
        throw FormatError("bad FLSU magic at byte offset 0");
    }
    offset = 4;
    const std::uint32_t version = flsu::read_u32(is, offset);
    if (version != flsu::kVersion) {
        throw FormatError("unsupported FLSU version " + std::to_string(version) +
                          " at byte offset 4");
    }
    ModelConfig c;
    c.n_layers = flsu::read_u32(is, offset);
    c.d_model = flsu::read_u32(is, offset);
    c.d_ffn = flsu::read_u32(is, offset);
    c.n_heads = flsu::read_u32(is, offset);
    c.vocab_size = flsu::read_u32(is, offset);
    c.n_img_tokens = flsu::read_u32(is, offset);
    c.n_head_layers = flsu::read_u32(is, offset);
    c.seed = flsu::read_u64(is, offset);
    c.validate();
    ModelBundle m = init_model(c);  // gives correct shapes; data overwritten below
    std::vector<Tensor*> slots;
    for_each_drawn_tensor(m, [&](const Tensor& t) { slots.push_back(const_cast<Tensor*>(&t)); });
    for (Tensor* slot : slots) {
        Tensor t = flsu::read_tensor(is, offset);
        if (t.shape() != slot->shape()) {
            throw FormatError("tensor shape " + t.shape_str() + " does not match config, expected " +
                              slot->shape_str() + " near byte offset " + std::to_string(offset));
        }
        *slot = std::move(t);
    }
    return m;
}

// Single-tensor FLSU variant, used for latent outputs.
inline void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open tensor file for writing: " + path);
    os.write(flsu::kMagic, 4);
    flsu::write_u32(os, flsu::kVersion);
    flsu::write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open tensor file: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, flsu::kMagic, 4) != 0) {
        throw FormatError("bad FLSU magic at byte offset 0");
    }
    std::size_t offset = 4;
    const std::uint32_t version = flsu::read_u32(is, offset);
    if (version != flsu::kVersion) {
        throw FormatError("unsupported FLSU version " + std::to_string(version));
    }
    return flsu::read_tensor(is, offset);
}

}  // namespace flashu
