#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "flashu/genpipe.hpp"
#include "vanilla_ref.hpp"

using namespace flashu;

namespace {

ModelConfig small_config(std::uint64_t seed = 11) {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 16;
    c.d_ffn = 32;
    c.n_heads = 2;
    c.vocab_size = 64;
    c.n_img_tokens = 8;
    c.n_head_layers = 2;
    c.seed = seed;
    return c;
}

GenConfig disabled_config(int t_steps, std::uint64_t seed) {
    GenConfig cfg;
    cfg.t_steps = t_steps;
    cfg.tau = 0.3;
    cfg.r_p = 0.0;
    cfg.r_ls = 0.0;
    cfg.t_ls = 10;
    cfg.t_cache = 1;
    cfg.sched.s_low = 5.0;
    cfg.sched.s_high = 5.0;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("guidance_scale regimes and boundary") {
    const GuidanceSchedule sched{3.75, 5.0, 0.3};
    CHECK(guidance_scale(sched, 0.9) == 3.75);
    CHECK(guidance_scale(sched, 0.1) == 5.0);
    CHECK(guidance_scale(sched, 0.3) == 5.0);  // boundary belongs to s_high
}

TEST_CASE("cfg_combine endpoints and arithmetic") {
    const Tensor c({2}, {2.0f, 4.0f}), u({2}, {1.0f, 2.0f});
    const Tensor at1 = cfg_combine(c, u, 1.0);
    CHECK(at1[0] == 2.0f);
    CHECK(at1[1] == 4.0f);
    const Tensor at0 = cfg_combine(c, u, 0.0);
    CHECK(at0[0] == 1.0f);
    const Tensor at3 = cfg_combine(c, u, 3.0);
    CHECK(at3[0] == 4.0f);  // 1 + 3*(2-1)
    CHECK_THROWS_AS(cfg_combine(c, Tensor({3}, 0.0f), 1.0), DimensionError);
}

TEST_CASE("euler_step basics and telescoping") {
    const Tensor z({2}, {0.0f, 1.0f});
    const Tensor zero({2}, 0.0f);
    CHECK(euler_step(z, zero, 0.1f).checksum() == z.checksum());
    const Tensor one({2}, 1.0f);
    CHECK(euler_step(zero, one, 0.1f)[0] == doctest::Approx(0.1f));

    const int t = 20;
    Tensor acc({2}, 0.0f);
    for (int k = 0; k < t; ++k) acc = euler_step(acc, one, 1.0f / t);
    CHECK(acc[0] == doctest::Approx(1.0f).epsilon(1e-5));
    CHECK_THROWS_AS(euler_step(z, Tensor({3}, 0.0f), 0.1f), DimensionError);
}

TEST_CASE("head_eval miss/hit schedule") {
    const ModelBundle m = init_model(small_config());
    FlopLedger led;
    SplitMix64 rng(5);
    Tensor h_img({8, 16});
    for (std::size_t i = 0; i < h_img.size(); ++i) h_img[i] = rng.next_uniform(-1, 1);

    HeadCache cache{5};
    for (int k = 0; k < 35; ++k) {
        const float t_norm = static_cast<float>(35 - k) / 35.0f;
        head_eval(cache, m, h_img, t_norm, k, led);
    }
    CHECK(cache.misses == 7);
    CHECK(cache.hits == 28);
}

TEST_CASE("head_eval with T_cache=1 is bit-identical to the uncached head") {
    const ModelBundle m = init_model(small_config());
    FlopLedger led;
    SplitMix64 rng(6);
    HeadCache cache{1};
    for (int k = 0; k < 6; ++k) {
        Tensor h_img({8, 16});
        for (std::size_t i = 0; i < h_img.size(); ++i) h_img[i] = rng.next_uniform(-1, 1);
        const float t_norm = static_cast<float>(6 - k) / 6.0f;
        const Tensor cached = head_eval(cache, m, h_img, t_norm, k, led);
        const Tensor direct = diffusion_head(m, h_img, t_norm, led).velocity;
        CHECK(cached.checksum() == direct.checksum());
    }
    CHECK(cache.hits == 0);
    CHECK(cache.misses == 6);
}

TEST_CASE("head_eval guards") {
    const ModelBundle m = init_model(small_config());
    FlopLedger led;
    const Tensor h_img({8, 16}, 0.1f);
    HeadCache bad{0};
    CHECK_THROWS_AS(head_eval(bad, m, h_img, 0.5f, 0, led), ConfigError);
    HeadCache cache{5};
    CHECK_THROWS_AS(head_eval(cache, m, h_img, 0.5f, -1, led), DomainError);
    CHECK_THROWS_AS(head_eval(cache, m, h_img, 0.5f, 1, led), DataError);  // hit with empty cache
}

TEST_CASE("head flop accounting: misses run the full head, hits only the projection") {
    const ModelBundle m = init_model(small_config());
    const std::uint64_t n = 8, d = 16, hl = 2;
    const Tensor h_img({8, 16}, 0.2f);
    HeadCache cache{3};
    FlopLedger led;
    head_eval(cache, m, h_img, 0.9f, 0, led);
    CHECK(led.get("diff_head") == (hl + 1) * 2 * n * d * d);
    head_eval(cache, m, h_img, 0.8f, 1, led);
    CHECK(led.get("diff_head") == (hl + 1) * 2 * n * d * d + 2 * n * d * d);
}

TEST_CASE("generate with all mechanisms disabled matches the vanilla oracle bit for bit") {
    const ModelBundle m = init_model(small_config());
    const std::vector<int> prompt{3, 14, 15, 9};
    const GenConfig cfg = disabled_config(12, 42);
    const GenResult res = generate(m, prompt, cfg, nullptr);
    const Tensor ref = testref::vanilla_gen(m, prompt, 12, 5.0, 42);
    CHECK(res.latent.checksum() == ref.checksum());
}

TEST_CASE("generate is deterministic") {
    const ModelBundle m = init_model(small_config());
    const std::vector<int> prompt{1, 2, 3};
    GenConfig cfg;
    cfg.t_steps = 10;
    cfg.t_ls = 5;
    cfg.r_ls = 0.25;
    cfg.seed = 9;
    const GenResult a = generate(m, prompt, cfg, nullptr);
    const GenResult b = generate(m, prompt, cfg, nullptr);
    CHECK(a.latent.checksum() == b.latent.checksum());
    CHECK(a.report.ledger.counters == b.report.ledger.counters);
}

TEST_CASE("guidance trace is a two-value ascending step function") {
    const ModelBundle m = init_model(small_config());
    GenConfig cfg;
    cfg.t_steps = 35;
    cfg.r_ls = 0.0;
    cfg.t_cache = 5;
    cfg.seed = 3;
    const GenResult res = generate(m, {5, 6}, cfg, nullptr);
    const auto& trace = res.report.guidance_trace;
    REQUIRE(trace.size() == 35);
    int switches = 0;
    for (std::size_t k = 1; k < trace.size(); ++k) {
        CHECK(trace[k] >= trace[k - 1]);
        if (trace[k] != trace[k - 1]) ++switches;
    }
    CHECK(switches == 1);
    // t_norm = (35-k)/35 > 0.3 iff k <= 24
    CHECK(trace[24] == 3.75);
    CHECK(trace[25] == 5.0);
}

TEST_CASE("generate audit counters") {
    const ModelBundle m = init_model(small_config());
    GenConfig cfg;
    cfg.t_steps = 20;
    cfg.t_ls = 10;
    cfg.r_ls = 0.5;  // ceil(0.5*4) = 2 layers skipped per cached step
    cfg.t_cache = 5;
    cfg.seed = 8;
    const GenResult res = generate(m, {4}, cfg, nullptr);
    CHECK(res.report.steps == 20);
    CHECK(res.report.full_steps == 2);
    CHECK(res.report.skipped_layer_executions == (20 - 2) * 2);
    CHECK(res.report.cache_cond.misses == 4);
    CHECK(res.report.cache_cond.hits == 16);
    CHECK(res.report.cache_uncond.misses == 4);
    CHECK(res.report.skip_audit.size() == 2);
    for (const auto& e : res.report.skip_audit) {
        CHECK(e.scores.size() == 4);
        CHECK(e.skip_list.size() == 2);
    }
}

TEST_CASE("generate guards") {
    const ModelBundle m = init_model(small_config());
    GenConfig cfg;
    CHECK_THROWS_AS(generate(m, {}, cfg, nullptr), DataError);
    cfg.t_steps = 0;
    CHECK_THROWS_AS(generate(m, {1}, cfg, nullptr), ConfigError);
}

TEST_CASE("latent stays finite and bounded") {
    const ModelBundle m = init_model(small_config());
    GenConfig cfg;
    cfg.t_steps = 15;
    cfg.seed = 13;
    const GenResult res = generate(m, {7, 8, 9}, cfg, nullptr);
    CHECK(res.latent.all_finite());
    for (std::size_t i = 0; i < res.latent.size(); ++i) {
        CHECK(std::abs(res.latent[i]) <= 1e4f);
    }
}
