#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <functional>

#include "qkv/bench.hpp"
#include "qkv/rng.hpp"

using namespace qkv;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::protocol;
}

StageTimingConfig modeled_timing() {
    StageTimingConfig c;
    c.contexts = {40, 476};
    c.trials = 2;
    c.clock.mode = ClockMode::model;
    return c;
}

SweepConfig small_sweep() {
    SweepConfig c;
    c.hops = {1, 3};
    c.budgets = {3.0, 6.0};
    c.seeds = {0, 1, 2};
    c.cache.tokens = 20;
    c.cache.head_dim = 8;
    c.chain.clock.mode = ClockMode::model;
    return c;
}

}  // namespace

TEST(Median, OddAndEven) {
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
    EXPECT_EQ(median({7}), 7.0);
    EXPECT_EQ(code_of([] { median({}); }), ErrorCode::parameter);
}

TEST(FormatNumber, ShortestRoundTrip) {
    EXPECT_EQ(format_number(0.1), "0.1");
    EXPECT_EQ(format_number(3.0), "3");
    EXPECT_EQ(format_number(-2.5e-7), "-2.5e-07");
    EXPECT_EQ(format_number(NAN), "nan");
    SplitMix64 r(1);
    for (int i = 0; i < 1000; ++i) {
        const double v = r.standard_normal() * std::pow(10.0, r.uniform(-20, 20));
        EXPECT_EQ(std::stod(format_number(v)), v);
    }
}

TEST(StageTiming, ModeledTimesFollowOpCounts) {
    const auto cfg = modeled_timing();
    const auto reps = run_stage_timing(cfg);
    ASSERT_EQ(reps.size(), 2u);
    EXPECT_EQ(reps[0].context, "40");
    EXPECT_EQ(reps[1].context, "1K");
    for (const auto& r : reps) {
        const double n = r.tokens, d = 16, pairs = 4;
        // Independent op counts: decode = pairs * (2d^2 + 2nd), prefill = pairs * (4nd^2 + n(n+1)d).
        const double decode = pairs * (2 * d * d + 2 * n * d);
        const double prefill = pairs * (4 * n * d * d + n * (n + 1) * d);
        const double elements = 2 * 2 * n * d;
        EXPECT_DOUBLE_EQ(r.generate_median_ms, decode / 1e6);
        EXPECT_DOUBLE_EQ(r.reprefill_median_ms, (prefill + decode) / 1e6);
        EXPECT_DOUBLE_EQ(r.create_card_median_ms, 6 * elements / 1e6);
        EXPECT_DOUBLE_EQ(r.inject_median_ms, 2 * elements / 1e6);
        EXPECT_DOUBLE_EQ(r.handoff_ttft_ms, r.inject_median_ms + r.generate_median_ms);
        EXPECT_LT(r.handoff_ttft_ms, r.reprefill_median_ms);
        EXPECT_EQ(r.trials, 2u);
    }
    EXPECT_EQ(run_stage_timing(cfg), reps);
}

TEST(StageTiming, Validation) {
    auto c = modeled_timing();
    c.trials = 1;
    EXPECT_EQ(code_of([&] { run_stage_timing(c); }), ErrorCode::parameter);
    c = modeled_timing();
    c.contexts = {};
    EXPECT_EQ(code_of([&] { run_stage_timing(c); }), ErrorCode::parameter);
}

TEST(Sweep, CellLayoutAndInvariants) {
    const auto cfg = small_sweep();
    const auto rep = run_error_sweep(cfg);
    ASSERT_EQ(rep.cells.size(), 5u * 2 * 2);
    EXPECT_EQ(rep.cells[0].method, "fp16_share");
    EXPECT_EQ(rep.cells[0].hops, 1u);
    EXPECT_EQ(rep.cells[1].budget_bits, 6.0);
    EXPECT_EQ(rep.cells[2].hops, 3u);
    EXPECT_EQ(rep.policy, "requantize_each_hop");
    for (const auto& c : rep.cells) {
        EXPECT_EQ(c.trials, 3u);
        EXPECT_EQ(c.objective_dominates, 3u) << c.method;
        EXPECT_LE(c.mean_error, c.max_error);
        if (c.method == "fp16_share") {
            EXPECT_EQ(c.max_error, 0.0);
        }
        if (c.method.starts_with("adaptive")) {
            EXPECT_LE(c.mean_average_bits, c.budget_bits);
        }
    }
    EXPECT_EQ(run_error_sweep(cfg), rep);
}

TEST(Sweep, CellMatchesDirectChainRuns) {
    const auto cfg = small_sweep();
    const auto rep = run_error_sweep(cfg);
    // adaptive_local, 3 hops, budget 3: index method 3 * 4 + hop 1 * 2 + budget 0.
    const SweepCell& cell = rep.cells[3 * 4 + 2];
    ASSERT_EQ(cell.method, "adaptive_local");
    ASSERT_EQ(cell.hops, 3u);
    ASSERT_EQ(cell.budget_bits, 3.0);
    double err = 0;
    for (auto seed : cfg.seeds) {
        SyntheticConfig sc = cfg.cache;
        sc.seed = derive_seed(seed, 0x5357);
        ChainConfig cc = cfg.chain;
        cc.seed = seed;
        cc.budget_bits_per_token = 3.0;
        const auto hops = run_chain(TopologyGraph::chain(4, "toy-v1"), generate_synthetic_cache(sc), HandoffMethod::adaptive_local,
                                    HopPolicy::requantize_each_hop, cc);
        err += hops[2].output_relative_error;
    }
    EXPECT_DOUBLE_EQ(cell.mean_error, err / 3);
}

TEST(Reports, JsonRoundTrips) {
    const auto t = run_stage_timing(modeled_timing());
    EXPECT_EQ(parse_timing_json(render(t, ReportFormat::json)), t);
    const auto s = run_error_sweep(small_sweep());
    EXPECT_EQ(parse_sweep_json(render(s, ReportFormat::json)), s);
    ChainConfig cc;
    cc.clock.mode = ClockMode::model;
    SyntheticConfig sc;
    const auto h = run_chain(TopologyGraph::chain(3, "toy-v1"), generate_synthetic_cache(sc), HandoffMethod::adaptive_topology,
                             HopPolicy::requantize_each_hop, cc);
    EXPECT_EQ(parse_hops_json(render(h, ReportFormat::json)), h);
}

TEST(Reports, CsvHeadersAndRows) {
    const auto t = run_stage_timing(modeled_timing());
    const std::string csv = render(t, ReportFormat::csv);
    EXPECT_TRUE(csv.starts_with(std::string(timing_csv_header) + "\n"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    const std::string row = csv.substr(csv.find("1K,"));
    EXPECT_EQ(row.substr(0, row.find('\n')),
              "1K,476,2," + format_number(t[1].create_card_median_ms) + "," + format_number(t[1].inject_median_ms) + "," +
                  format_number(t[1].generate_median_ms) + "," + format_number(t[1].reprefill_median_ms) + "," +
                  format_number(t[1].handoff_ttft_ms));
    const std::string s = render(run_error_sweep(small_sweep()), ReportFormat::csv);
    EXPECT_TRUE(s.starts_with(std::string(sweep_csv_header) + "\n"));
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 21);
}

TEST(Reports, ParseErrorsAreDataErrors) {
    EXPECT_EQ(code_of([] { parse_sweep_json("{"); }), ErrorCode::data);
    EXPECT_EQ(code_of([] { parse_sweep_json("{}"); }), ErrorCode::data);
    EXPECT_EQ(code_of([] { parse_timing_json("[]"); }), ErrorCode::data);
    EXPECT_EQ(code_of([] { parse_hops_json(R"({"hops":[{"hop":"x"}]})"); }), ErrorCode::data);
    EXPECT_EQ(code_of([] { parse_format("xml"); }), ErrorCode::parameter);
}

TEST(Reports, EmitWritesFile) {
    const std::string path = ::testing::TempDir() + "/qkv_report.txt";
    EXPECT_EQ(emit_report("abc\n", path), 4u);
    const Bytes b = read_file(path);
    EXPECT_EQ(std::string(b.begin(), b.end()), "abc\n");
    std::remove(path.c_str());
    EXPECT_EQ(code_of([] { emit_report("x", "/nonexistent-dir/x"); }), ErrorCode::io);
}
