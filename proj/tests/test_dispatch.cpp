#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flashu/dispatch.hpp"

using namespace flashu;

namespace {

ModelConfig small_config(std::uint64_t seed = 23) {
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

Request gen_request(nlohmann::json overrides = nlohmann::json::object()) {
    Request req;
    req.task = Task::Gen;
    req.prompt_tokens = {3, 4, 5};
    req.overrides = std::move(overrides);
    return req;
}

Request und_request(nlohmann::json overrides = nlohmann::json::object()) {
    Request req;
    req.task = Task::Und;
    req.visual_tokens = {10, 11, 12, 13};
    req.text_tokens = {20, 21};
    req.overrides = std::move(overrides);
    return req;
}

}  // namespace

TEST_CASE("default configs carry the documented values") {
    const nlohmann::json gen = default_config(Task::Gen);
    CHECK(gen.at("tau").get<double>() == 0.3);
    CHECK(gen.at("T_cache").get<int>() == 5);
    CHECK(gen.at("T").get<int>() == 35);
    CHECK(gen.at("T0").get<int>() == 50);
    CHECK(gen.at("r_p").get<double>() == 0.2);
    CHECK(gen.at("r_ls").get<double>() == 0.2);
    CHECK(gen.at("s_low").get<double>() == 3.75);
    CHECK(gen.at("s_high").get<double>() == 5.0);
    CHECK(gen.at("t_switch").get<double>() == 0.3);

    const nlohmann::json und = default_config(Task::Und);
    CHECK(und.at("rho").get<double>() == 0.5);
    CHECK(und.at("L_prune").get<int>() == 2);
    CHECK(und.at("N_max").get<int>() == 128);
    CHECK(und.at("r_p").get<double>() == 0.1);
    CHECK(und.at("r_ls").get<double>() == 0.1);
    CHECK(und.at("T_ls").get<int>() == 10);
    CHECK(und.at("N_calib").get<int>() == 20);
}

TEST_CASE("resolve_config merges overrides and rejects unknown keys") {
    Request req = gen_request({{"r_p", 0.0}, {"T", 10}});
    const nlohmann::json cfg = resolve_config(req);
    CHECK(cfg.at("r_p").get<double>() == 0.0);
    CHECK(cfg.at("T").get<int>() == 10);
    CHECK(cfg.at("tau").get<double>() == 0.3);  // untouched default

    Request bad = gen_request({{"rho", 0.5}});  // und-only key
    CHECK_THROWS_AS(resolve_config(bad), ConfigError);
    try {
        resolve_config(bad);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("rho") != std::string::npos);
        CHECK(msg.find("valid keys") != std::string::npos);
        CHECK(msg.find("T_cache") != std::string::npos);
    }
}

TEST_CASE("gen request produces a latent and diff_head ledger lines") {
    const ModelBundle m = init_model(small_config());
    const Response resp = run(gen_request({{"T", 6}}), m, nullptr);
    CHECK(resp.task == Task::Gen);
    CHECK(resp.latent.rows() == 8);
    CHECK(resp.report.ledger.get("diff_head") > 0);
    CHECK(resp.report.task == "gen");
    CHECK(resp.report.config.at("T").get<int>() == 6);
}

TEST_CASE("und request produces tokens and a prune record") {
    const ModelBundle m = init_model(small_config());
    const Response resp = run(und_request({{"N_max", 4}, {"r_p", 0.0}}), m, nullptr);
    CHECK(resp.task == Task::Und);
    CHECK(resp.report.task == "und");
    CHECK(resp.report.ledger.get("lm_head") > 0);
    CHECK(resp.report.pruned_tokens.size() == 2);  // ceil(0.5 * 4)
    CHECK(resp.report.visual_kept == 2);
}

TEST_CASE("payload/task mismatch is rejected") {
    const ModelBundle m = init_model(small_config());
    Request bad_gen = gen_request();
    bad_gen.prompt_tokens.clear();
    CHECK_THROWS_AS(run(bad_gen, m, nullptr), DataError);
    Request mixed = und_request();
    mixed.prompt_tokens = {1};
    CHECK_THROWS_AS(run(mixed, m, nullptr), DataError);
}

TEST_CASE("repeated requests return identical responses") {
    const ModelBundle m = init_model(small_config());
    const Response a = run(gen_request({{"T", 5}}), m, nullptr);
    const Response b = run(gen_request({{"T", 5}}), m, nullptr);
    CHECK(a.latent.checksum() == b.latent.checksum());
    CHECK(a.report.output_checksum == b.report.output_checksum);
}

TEST_CASE("gen and und runs do not interfere") {
    const ModelBundle m = init_model(small_config());
    const nlohmann::json gen_over{{"T", 5}};
    const nlohmann::json und_over{{"N_max", 3}, {"r_p", 0.0}};
    const Response gen_alone = run(gen_request(gen_over), m, nullptr);
    const Response und_alone = run(und_request(und_over), m, nullptr);

    const Response g1 = run(gen_request(gen_over), m, nullptr);
    const Response u1 = run(und_request(und_over), m, nullptr);
    const Response g2 = run(gen_request(gen_over), m, nullptr);
    const Response u2 = run(und_request(und_over), m, nullptr);
    CHECK(g1.latent.checksum() == gen_alone.latent.checksum());
    CHECK(g2.latent.checksum() == gen_alone.latent.checksum());
    CHECK(u1.tokens == und_alone.tokens);
    CHECK(u2.tokens == und_alone.tokens);
}

TEST_CASE("baseline overrides disable every mechanism") {
    const nlohmann::json gen = baseline_overrides(Task::Gen);
    CHECK(gen.at("r_p").get<double>() == 0.0);
    CHECK(gen.at("r_ls").get<double>() == 0.0);
    CHECK(gen.at("T_cache").get<int>() == 1);
    CHECK(gen.at("s_low").get<double>() == 5.0);
    CHECK(gen.at("T").get<int>() == 50);
    const nlohmann::json und = baseline_overrides(Task::Und);
    CHECK(und.at("rho").get<double>() == 0.0);
    CHECK(und.at("r_p").get<double>() == 0.0);
    CHECK(und.at("r_ls").get<double>() == 0.0);
}

TEST_CASE("config adapters map every field") {
    const GenConfig g = gen_config_from_json(default_config(Task::Gen));
    CHECK(g.t_steps == 35);
    CHECK(g.t_cache == 5);
    CHECK(g.sched.s_low == 3.75);
    const UndConfig u = und_config_from_json(default_config(Task::Und));
    CHECK(u.n_max == 128);
    CHECK(u.l_prune == 2);
    CHECK(u.rho == 0.5);
    CHECK(u.eos_token == 1);
}
