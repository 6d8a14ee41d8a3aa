#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashu/common.hpp"
#include "flashu/tensor.hpp"

namespace flashu {

struct SkipAuditEntry {
    int step = 0;
    std::vector<double> scores;
    std::vector<std::size_t> skip_list;
};

struct CacheStats {
    int hits = 0;
    int misses = 0;
};

// Everything a single inference run reports: exact FLOP ledger, wall-clock
// per component, audit trails for every mechanism, and optional analysis
// blobs. Versioned JSON on disk.
struct RunReport {
    static constexpr int kVersion = 1;

    std::string task;
    nlohmann::json config;
    FlopLedger ledger;
    std::map<std::string, std::uint64_t> time_ns;

    std::vector<SkipAuditEntry> skip_audit;
    int steps = 0;                          // gen: T; und: decode iterations
    int full_steps = 0;                     // recalc steps among `steps`
    std::uint64_t skipped_layer_executions = 0;

    std::vector<std::size_t> pruned_tokens;  // und, absolute prefill positions
    std::size_t visual_kept = 0;

    CacheStats cache_cond, cache_uncond;    // gen only
    std::vector<double> guidance_trace;     // gen only, s per step

    std::vector<int> tokens;                // und output
    std::uint64_t output_checksum = 0;

    nlohmann::json analysis;                // optional blobs
};

class ScopedTimer {
  public:
    ScopedTimer(RunReport& report, const std::string& label)
        : report_(report), label_(label), start_(std::chrono::steady_clock::now()) {}
    ~ScopedTimer() {
        const auto end = std::chrono::steady_clock::now();
        report_.time_ns[label_] +=
            std::chrono::duration_cast<std::chrono::nanoseconds>(end - start_).count();
    }

  private:
    RunReport& report_;
    std::string label_;
    std::chrono::steady_clock::time_point start_;
};

inline nlohmann::json report_to_json(const RunReport& r) {
    nlohmann::json j;
    j["report_version"] = RunReport::kVersion;
    j["task"] = r.task;
    j["config"] = r.config;
    j["flops"] = r.ledger.counters;
    j["flops_total"] = r.ledger.total();
    j["time_ns"] = r.time_ns;
    nlohmann::json audit = nlohmann::json::array();
    for (const auto& e : r.skip_audit) {
        audit.push_back({{"step", e.step}, {"scores", e.scores}, {"skip_list", e.skip_list}});
    }
    j["skip_audit"] = audit;
    j["skip_summary"] = {{"steps", r.steps},
                         {"full_steps", r.full_steps},
                         {"skipped_layer_executions", r.skipped_layer_executions}};
    j["prune_record"] = {{"pruned_tokens", r.pruned_tokens}, {"visual_kept", r.visual_kept}};
    j["cache"] = {{"cond", {{"hits", r.cache_cond.hits}, {"misses", r.cache_cond.misses}}},
                  {"uncond", {{"hits", r.cache_uncond.hits}, {"misses", r.cache_uncond.misses}}}};
    j["guidance_trace"] = r.guidance_trace;
    j["tokens"] = r.tokens;
    j["output_checksum"] = hex64(r.output_checksum);
    if (!r.analysis.is_null()) j["analysis"] = r.analysis;
    return j;
}

inline void save_report(const RunReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open report file for writing: " + path);
    f << report_to_json(r).dump(2) << "\n";
}

}  // namespace flashu
