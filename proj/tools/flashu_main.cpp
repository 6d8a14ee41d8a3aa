// flashu: task-aware inference acceleration on a toy unified transformer.
//
// Subcommands: init-model, calibrate, build-plan, gen, und, bench ablate,
// analyze. Every command is a pure function of its flags and config file;
// FLASHU_LOG in {error,info,debug} controls verbosity on stderr.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flashu/bench.hpp"
#include "flashu/dispatch.hpp"
#include "flashu/model.hpp"
#include "flashu/sensitivity.hpp"

namespace {

int log_level() {
    const char* env = std::getenv("FLASHU_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "error") return 0;
    if (v == "debug") return 2;
    return 1;
}

void log_info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[flashu] " << msg << "\n";
}

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw flashu::DataError("cannot open file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw flashu::FormatError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

nlohmann::json merge_overrides(const std::string& config_path,
                               const std::vector<std::string>& sets) {
    nlohmann::json overrides = nlohmann::json::object();
    if (!config_path.empty()) {
        overrides = load_json_file(config_path);
        if (!overrides.is_object()) {
            throw flashu::FormatError("config file must hold a JSON object: " + config_path);
        }
    }
    for (const std::string& kv : sets) {  // flags override file values
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw flashu::UsageError("--set expects key=value, got: " + kv);
        }
        const std::string key = kv.substr(0, eq);
        const std::string val = kv.substr(eq + 1);
        try {
            overrides[key] = nlohmann::json::parse(val);
        } catch (const nlohmann::json::exception&) {
            overrides[key] = val;
        }
    }
    return overrides;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace flashu;
    CLI::App app{"task-aware acceleration on a toy unified transformer"};
    app.require_subcommand(1);

    // init-model
    auto* cmd_init = app.add_subcommand("init-model", "deterministically initialize a model");
    std::uint64_t init_seed = 0;
    std::string init_out = "model.flsu";
    ModelConfig init_cfg;
    cmd_init->add_option("--seed", init_seed, "weight seed");
    cmd_init->add_option("--out", init_out, "output FLSU path");
    cmd_init->add_option("--layers", init_cfg.n_layers);
    cmd_init->add_option("--d-model", init_cfg.d_model);
    cmd_init->add_option("--d-ffn", init_cfg.d_ffn);
    cmd_init->add_option("--heads", init_cfg.n_heads);
    cmd_init->add_option("--vocab", init_cfg.vocab_size);
    cmd_init->add_option("--img-tokens", init_cfg.n_img_tokens);
    cmd_init->add_option("--head-layers", init_cfg.n_head_layers);

    // calibrate
    auto* cmd_calib = app.add_subcommand("calibrate", "collect activations and score neurons");
    std::string calib_task = "gen", calib_model, calib_out = "scores.json";
    std::uint64_t calib_seed = 0;
    cmd_calib->add_option("--task", calib_task, "gen or und")->check(CLI::IsMember({"gen", "und"}));
    cmd_calib->add_option("--model", calib_model)->required();
    cmd_calib->add_option("--out", calib_out);
    cmd_calib->add_option("--seed", calib_seed, "calibration input seed");

    // build-plan
    auto* cmd_plan = app.add_subcommand("build-plan", "build pruning masks from scores");
    std::vector<std::string> plan_scores;
    double plan_rp = 0.2, plan_tau = 0.3;
    std::string plan_out = "plan.json";
    cmd_plan->add_option("--scores", plan_scores, "scores file (repeat per task)")->required();
    cmd_plan->add_option("--rp", plan_rp);
    cmd_plan->add_option("--tau", plan_tau);
    cmd_plan->add_option("--out", plan_out);

    // gen / und share override plumbing
    std::string run_model, run_plan, run_report = "report.json", run_out, run_config;
    std::vector<std::string> run_sets;
    bool run_baseline = false;
    std::uint64_t payload_seed = 0;
    auto add_run_opts = [&](CLI::App* cmd, const char* seed_flag) {
        cmd->add_option("--model", run_model)->required();
        cmd->add_option("--plan", run_plan);
        cmd->add_option(seed_flag, payload_seed);
        cmd->add_option("--report", run_report);
        cmd->add_option("--out", run_out, "output artifact path");
        cmd->add_option("--config", run_config, "JSON file of config overrides");
        cmd->add_option("--set", run_sets, "key=value override (beats the config file)");
        cmd->add_flag("--baseline", run_baseline, "apply the all-mechanisms-off override set");
    };
    auto* cmd_gen = app.add_subcommand("gen", "image-generation pathway");
    add_run_opts(cmd_gen, "--prompt-seed");
    auto* cmd_und = app.add_subcommand("und", "understanding pathway");
    add_run_opts(cmd_und, "--input-seed");

    // bench ablate
    auto* cmd_bench = app.add_subcommand("bench", "benchmarking");
    auto* cmd_ablate = cmd_bench->add_subcommand("ablate", "run the ablation grid");
    std::string ab_model, ab_plan, ab_task = "gen", ab_grid, ab_out = "ablation.csv";
    int ab_jobs = 1;
    cmd_ablate->add_option("--model", ab_model)->required();
    cmd_ablate->add_option("--plan", ab_plan);
    cmd_ablate->add_option("--task", ab_task)->check(CLI::IsMember({"gen", "und"}));
    cmd_ablate->add_option("--grid", ab_grid, "JSON grid of extra cells");
    cmd_ablate->add_option("--out", ab_out);
    cmd_ablate->add_option("--jobs", ab_jobs);

    // analyze
    auto* cmd_analyze = app.add_subcommand("analyze", "specialization and similarity reports");
    std::string an_model, an_out = "analysis.json";
    std::uint64_t an_seed = 0;
    cmd_analyze->add_option("--model", an_model)->required();
    cmd_analyze->add_option("--out", an_out);
    cmd_analyze->add_option("--seed", an_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*cmd_init) {
            init_cfg.seed = init_seed;
            const ModelBundle m = init_model(init_cfg);
            save_model(m, init_out);
            log_info("wrote " + init_out);
        } else if (*cmd_calib) {
            const ModelBundle m = load_model(calib_model);
            CalibrationSet calib;
            if (calib_task == "gen") {
                const std::vector<int> prompt = synthetic_prompt(calib_seed, 8, m.config.vocab_size);
                calib = collect_gen_calibration(m, prompt, 50, 5.0, calib_seed);
            } else {
                calib = collect_und_calibration(m, 20, 8, calib_seed);
            }
            const SensitivityScores scores = score_all_layers(m, calib);
            std::ofstream f(calib_out);
            if (!f) throw DataError("cannot open scores file for writing: " + calib_out);
            f << scores_to_json(scores).dump(2) << "\n";
            log_info("wrote " + calib_out);
        } else if (*cmd_plan) {
            std::map<Task, SensitivityScores> by_task;
            std::size_t d_ffn = 0;
            for (const std::string& path : plan_scores) {
                const SensitivityScores s = scores_from_json(load_json_file(path));
                if (!s.wanda.empty()) d_ffn = s.wanda[0].size();
                by_task[s.task] = s;
            }
            const PrunePlan plan = build_plan(by_task, plan_rp, plan_tau);
            save_plan(plan, d_ffn, plan_out);
            log_info("wrote " + plan_out);
        } else if (*cmd_gen || *cmd_und) {
            const ModelBundle m = load_model(run_model);
            PrunePlan plan;
            const bool have_plan = !run_plan.empty();
            if (have_plan) plan = load_plan(run_plan);
            Request req;
            req.task = *cmd_gen ? Task::Gen : Task::Und;
            req.overrides = merge_overrides(run_config, run_sets);
            if (run_baseline) {
                const nlohmann::json base = baseline_overrides(req.task);
                for (auto it = base.begin(); it != base.end(); ++it) {
                    req.overrides[it.key()] = it.value();
                }
            }
            Request probe;
            probe.task = req.task;
            probe.overrides = req.overrides;
            const nlohmann::json resolved = resolve_config(probe);
            if (*cmd_gen) {
                req.prompt_tokens = synthetic_prompt(
                    payload_seed, resolved.at("n_cond").get<std::size_t>(), m.config.vocab_size);
            } else {
                const auto n_vis = resolved.at("n_vis").get<std::size_t>();
                const auto n_text = resolved.at("n_text").get<std::size_t>();
                std::vector<int> all =
                    synthetic_prompt(payload_seed, n_vis + n_text, m.config.vocab_size);
                req.visual_tokens.assign(all.begin(),
                                         all.begin() + static_cast<std::ptrdiff_t>(n_vis));
                req.text_tokens.assign(all.begin() + static_cast<std::ptrdiff_t>(n_vis), all.end());
            }
            const Response resp = run(req, m, have_plan ? &plan : nullptr);
            save_report(resp.report, run_report);
            if (!run_out.empty()) {
                if (resp.task == Task::Gen) {
                    save_tensor(resp.latent, run_out);
                } else {
                    std::ofstream f(run_out);
                    if (!f) throw DataError("cannot open output file for writing: " + run_out);
                    f << nlohmann::json(resp.tokens).dump() << "\n";
                }
            }
            log_info("wrote " + run_report);
        } else if (*cmd_ablate) {
            const ModelBundle m = load_model(ab_model);
            PrunePlan plan;
            const bool have_plan = !ab_plan.empty();
            if (have_plan) plan = load_plan(ab_plan);
            const Task task = ab_task == "gen" ? Task::Gen : Task::Und;
            std::vector<AblationCell> grid = standard_ablation_cells(task);
            if (!ab_grid.empty()) {
                for (const auto& cell : load_json_file(ab_grid)) {
                    grid.push_back({cell.at("name").get<std::string>(), cell.at("overrides")});
                }
            }
            const auto rows = ablate(m, have_plan ? &plan : nullptr, task, grid, 7, ab_jobs);
            write_ablation_csv(rows, ab_out);
            log_info("wrote " + ab_out);
        } else if (*cmd_analyze) {
            const ModelBundle m = load_model(an_model);
            const std::vector<int> prompt = synthetic_prompt(an_seed, 8, m.config.vocab_size);
            const CalibrationSet cg = collect_gen_calibration(m, prompt, 50, 5.0, an_seed);
            const CalibrationSet cu = collect_und_calibration(m, 20, 8, an_seed);
            const nlohmann::json j = analysis_reports(m, cg, cu, 2, an_seed);
            std::ofstream f(an_out);
            if (!f) throw DataError("cannot open analysis file for writing: " + an_out);
            f << j.dump(2) << "\n";
            log_info("wrote " + an_out);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
