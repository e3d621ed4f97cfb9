#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qkv/handoff.hpp"

namespace qkv {

// ---------------------------------------------------------------- stage timing

struct StageTimingConfig {
    std::vector<std::uint32_t> contexts{476, 1939, 3877};
    std::size_t trials = 3;  // warmup excluded
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t head_dim = 16;
    std::uint32_t group_size = default_group_size;
    std::uint64_t seed = 0;
    StageClock clock;

    void validate() const;
};

struct StageTimingReport {
    std::string context;  // nominal label ("1K", "4K", "8K") or the token count
    std::uint32_t tokens = 0;
    std::size_t trials = 0;
    double create_card_median_ms = 0.0;
    double inject_median_ms = 0.0;
    double generate_median_ms = 0.0;
    double reprefill_median_ms = 0.0;
    double handoff_ttft_ms = 0.0;  // inject + generate medians

    friend bool operator==(const StageTimingReport&, const StageTimingReport&) = default;
};

// Per trial: (a) re-prefill = causal prefill over the whole context plus one
// decode step, (b) create_card = uniform 4-bit quantize + build + encode,
// (c) inject = dequantize the decoded card, (d) generate = one decode step on
// the injected cache. One warmup trial runs first and is discarded.
std::vector<StageTimingReport> run_stage_timing(const StageTimingConfig& cfg);

double median(std::vector<double> xs);

// ---------------------------------------------------------------- sweep

struct SweepConfig {
    std::vector<HandoffMethod> methods{HandoffMethod::fp16_share, HandoffMethod::uniform_q4, HandoffMethod::uniform_q8,
                                       HandoffMethod::adaptive_local, HandoffMethod::adaptive_topology};
    std::vector<std::size_t> hops{2, 3, 4, 5};
    std::vector<double> budgets{4.0, 8.0};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    HopPolicy policy = HopPolicy::requantize_each_hop;
    SyntheticConfig cache;  // seed is replaced per trial
    ChainConfig chain;      // seed and budget are replaced per cell

    SweepConfig() { cache.tokens = 48; }
    void validate() const;
};

struct SweepCell {
    std::string method;
    std::size_t hops = 0;
    double budget_bits = 0.0;
    std::size_t trials = 0;
    double mean_error = 0.0;
    double max_error = 0.0;
    double mean_card_bytes = 0.0;
    double mean_average_bits = 0.0;
    double mean_objective = 0.0;
    double mean_uniform_objective = 0.0;
    std::size_t objective_dominates = 0;  // trials with objective <= uniform_objective

    friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct SweepReport {
    std::string policy;
    std::uint32_t tokens = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells;  // method-major, then hops, then budget

    friend bool operator==(const SweepReport&, const SweepReport&) = default;
};

// One chain of max(hops) + 1 agents per (method, budget, seed); the cell for
// h hops reads the h-th hop report. Methods without a budget produce the same
// numbers in every budget column.
SweepReport run_error_sweep(const SweepConfig& cfg);

// ---------------------------------------------------------------- reports

enum class ReportFormat { json, csv };
ReportFormat parse_format(std::string_view s);

inline constexpr std::string_view timing_csv_header =
    "context,tokens,trials,create_card_ms,inject_ms,generate_ms,reprefill_ms,handoff_ttft_ms";
inline constexpr std::string_view sweep_csv_header =
    "method,hops,budget_bits,trials,mean_error,max_error,mean_card_bytes,mean_average_bits,mean_objective,mean_uniform_objective,"
    "objective_dominates";
inline constexpr std::string_view hop_csv_header =
    "hop,method,from,to,average_bits,output_relative_error,card_bytes,card_crc,objective,uniform_objective,create_card_ms,inject_ms,"
    "generate_ms";

// Shortest round-trip decimal form.
std::string format_number(double v);

std::string render(const std::vector<StageTimingReport>& r, ReportFormat f);
std::string render(const SweepReport& r, ReportFormat f);
std::string render(const std::vector<HopReport>& r, ReportFormat f);

std::vector<StageTimingReport> parse_timing_json(std::string_view text);
SweepReport parse_sweep_json(std::string_view text);
std::vector<HopReport> parse_hops_json(std::string_view text);

// Writes the text to `path` (io error if unwritable); returns bytes written.
std::size_t emit_report(std::string_view text, const std::string& path);

}  // namespace qkv
