#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "flashu/model.hpp"
#include "flashu/plan.hpp"

using namespace flashu;

namespace {

ModelConfig tiny_config(std::uint32_t d_model, std::uint32_t d_ffn, std::uint64_t seed) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = d_model;
    c.d_ffn = d_ffn;
    c.n_heads = 1;
    c.vocab_size = 16;
    c.n_img_tokens = 4;
    c.n_head_layers = 1;
    c.seed = seed;
    return c;
}

PrunePlan plan_with_mask(Task task, std::size_t n_layers, std::vector<bool> keep) {
    PrunePlan plan;
    plan.r_p = 0.5;
    LayerMask m;
    m.keep = std::move(keep);
    plan.masks[task] = std::vector<LayerMask>(n_layers, m);
    return plan;
}

Tensor random_input(std::uint64_t seed, std::size_t rows, std::size_t d) {
    SplitMix64 rng(seed);
    Tensor t({rows, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_uniform(-1, 1);
    return t;
}

}  // namespace

TEST_CASE("ffn_pruned with an all-true mask is bit-identical to ffn_full") {
    const ModelBundle m = init_model(tiny_config(8, 16, 1));
    const PrunePlan plan = plan_with_mask(Task::Gen, 2, std::vector<bool>(16, true));
    FlopLedger led_a, led_b;
    const Tensor x = random_input(2, 3, 8);
    const Tensor full = ffn_full(m, 0, x, led_a);
    const Tensor pruned = ffn_pruned(m, 0, x, Task::Gen, plan, led_b);
    CHECK(full.checksum() == pruned.checksum());
}

TEST_CASE("ffn_pruned with an all-false mask reduces to the output bias") {
    ModelBundle m = init_model(tiny_config(8, 16, 2));
    m.layers[0].b2 = Tensor({8}, 1.25f);
    const PrunePlan plan = plan_with_mask(Task::Gen, 2, std::vector<bool>(16, false));
    FlopLedger led;
    const Tensor out = ffn_pruned(m, 0, random_input(3, 2, 8), Task::Gen, plan, led);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 1.25f);
}

TEST_CASE("ffn_pruned equals ffn_full on a weight-surgered bundle") {
    SplitMix64 rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelBundle m = init_model(tiny_config(4, 8, 300 + trial));
        std::vector<bool> keep(8);
        for (std::size_t i = 0; i < 8; ++i) keep[i] = rng.next_u64() % 2 == 0;
        const PrunePlan plan = plan_with_mask(Task::Und, 2, keep);

        ModelBundle surgered = m;
        for (std::size_t j = 0; j < 8; ++j) {
            if (keep[j]) continue;
            for (std::size_t i = 0; i < 4; ++i) surgered.layers[0].w1.at(i, j) = 0.0f;
            surgered.layers[0].b1[j] = 0.0f;
            for (std::size_t c = 0; c < 4; ++c) surgered.layers[0].w2.at(j, c) = 0.0f;
        }
        FlopLedger led;
        const Tensor x = random_input(400 + trial, 3, 4);
        const Tensor pruned = ffn_pruned(m, 0, x, Task::Und, plan, led);
        const Tensor full = ffn_full(surgered, 0, x, led);
        for (std::size_t i = 0; i < pruned.size(); ++i) {
            CHECK(pruned[i] == doctest::Approx(full[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("ffn_pruned logs the compacted kernel cost") {
    const ModelBundle m = init_model(tiny_config(8, 16, 4));
    std::vector<bool> keep(16, true);
    for (std::size_t i = 0; i < 5; ++i) keep[i] = false;
    const PrunePlan plan = plan_with_mask(Task::Gen, 2, keep);
    FlopLedger led;
    ffn_pruned(m, 0, random_input(5, 3, 8), Task::Gen, plan, led);
    CHECK(led.get("trunk.ffn") == 4ULL * 3 * 8 * 11);
}

TEST_CASE("ffn_sublayer requires a plan on the pruned path") {
    const ModelBundle m = init_model(tiny_config(8, 16, 5));
    FlopLedger led;
    const Tensor x = random_input(6, 2, 8);
    CHECK_THROWS_AS(ffn_sublayer(m, 0, x, FfnPath::Pruned, Task::Gen, nullptr, led), ConfigError);
    const PrunePlan plan = plan_with_mask(Task::Und, 2, std::vector<bool>(16, true));
    CHECK_THROWS_AS(ffn_sublayer(m, 0, x, FfnPath::Pruned, Task::Gen, &plan, led), ConfigError);
}

TEST_CASE("select_path gen side") {
    const HybridSwitch sw{0.3, Task::Gen, 0};
    CHECK(select_path(sw, 0.9) == FfnPath::Pruned);
    CHECK(select_path(sw, 0.2) == FfnPath::Full);
    CHECK(select_path(sw, 0.3) == FfnPath::Full);
    CHECK_THROWS_AS(select_path(sw, 0.0), DomainError);
    CHECK_THROWS_AS(select_path(sw, 1.5), DomainError);
}

TEST_CASE("select_path gen is monotone: once full, stays full") {
    const HybridSwitch sw{0.3, Task::Gen, 0};
    bool seen_full = false;
    for (int k = 0; k < 35; ++k) {
        const double t = static_cast<double>(35 - k) / 35.0;
        const bool full = select_path(sw, t) == FfnPath::Full;
        if (seen_full) CHECK(full);
        seen_full = seen_full || full;
    }
    CHECK(seen_full);
}

TEST_CASE("select_path und side uses the ceil(tau*N_max) boundary") {
    const HybridSwitch sw{0.3, Task::Und, 128};
    CHECK(select_path(sw, 39) == FfnPath::Full);
    CHECK(select_path(sw, 40) == FfnPath::Pruned);
    CHECK_THROWS_AS(select_path(sw, 0), DomainError);
}

TEST_CASE("expected_cost is the Eq-style affine combination") {
    CHECK(expected_cost(1.0, 10.0, 4.0) == doctest::Approx(10.0));
    CHECK(expected_cost(0.0, 10.0, 4.0) == doctest::Approx(4.0));
    CHECK(expected_cost(0.3, 1.0, 0.8) == doctest::Approx(0.86));
}

TEST_CASE("masked_neuron_count floors") {
    CHECK(masked_neuron_count(0.2, 256) == 51);
    CHECK(masked_neuron_count(0.0, 256) == 0);
    CHECK(masked_neuron_count(0.5, 7) == 3);
}

TEST_CASE("prune plan mask lookup errors") {
    const PrunePlan plan = plan_with_mask(Task::Gen, 2, std::vector<bool>(4, true));
    CHECK_THROWS_AS(plan.mask(Task::Und, 0), ConfigError);
    CHECK_THROWS_AS(plan.mask(Task::Gen, 2), ConfigError);
    CHECK(plan.mask(Task::Gen, 1).kept_count() == 4);
}

TEST_CASE("hybrid FFN ledger over a stepped schedule matches tau-weighted cost") {
    // With tau*T an integer the measured total is exactly T * E[C].
    const ModelBundle m = init_model(tiny_config(8, 16, 6));
    const std::size_t masked = 8;
    std::vector<bool> keep(16, true);
    for (std::size_t i = 0; i < masked; ++i) keep[i] = false;
    const PrunePlan plan = plan_with_mask(Task::Gen, 2, keep);
    const HybridSwitch sw{0.5, Task::Gen, 0};
    const int t_steps = 10;
    FlopLedger led;
    const Tensor x = random_input(8, 2, 8);
    for (int k = 0; k < t_steps; ++k) {
        const double t_norm = static_cast<double>(t_steps - k) / t_steps;
        if (select_path(sw, t_norm) == FfnPath::Pruned) {
            ffn_pruned(m, 0, x, Task::Gen, plan, led);
        } else {
            ffn_full(m, 0, x, led);
        }
    }
    const double c_full = 4.0 * 2 * 8 * 16;
    const double c_pruned = 4.0 * 2 * 8 * 8;
    CHECK(static_cast<double>(led.get("trunk.ffn")) ==
          doctest::Approx(t_steps * expected_cost(0.5, c_full, c_pruned)));
}
