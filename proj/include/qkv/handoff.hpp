#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qkv/allocator.hpp"
#include "qkv/cachecard.hpp"
#include "qkv/controller.hpp"
#include "qkv/importance.hpp"
#include "qkv/toy_model.hpp"

namespace qkv {

// ---------------------------------------------------------------- topology

enum class TopologyKind { chain, tree };

struct AgentSpec {
    std::string id;
    std::string model;

    friend bool operator==(const AgentSpec&, const AgentSpec&) = default;
};

struct TopologyGraph {
    std::vector<AgentSpec> agents;
    std::vector<std::pair<std::string, std::string>> edges;  // (from, to)
    TopologyKind kind = TopologyKind::chain;

    // Edges must reference declared agents.
    void validate() const;
    bool is_simple_chain() const;
    // Agents in chain order (throws unsupported_topology if not a chain).
    std::vector<AgentSpec> chain_order() const;

    static TopologyGraph chain(std::size_t agents, const std::string& model);
    // "agent <id> <model>" and "edge <from> <to>" lines; kind is chain when
    // the edges form a simple path, tree otherwise.
    static TopologyGraph parse(std::string_view text);
    std::string to_text() const;
};

// ---------------------------------------------------------------- clock

// Stage durations either come from the monotonic clock or from a
// deterministic cost model (multiply-accumulates divided by a fixed rate),
// which keeps reports byte-reproducible.
enum class ClockMode { wall, model };

struct StageClock {
    ClockMode mode = ClockMode::wall;
    double model_ops_per_ms = 1.0e6;

    // Runs `work`; returns milliseconds from the wall clock or from
    // `modeled_ops` depending on mode.
    double time(const std::function<void()>& work, double modeled_ops) const;
};

// Modeled operation counts of the handoff stages.
double create_card_ops(const CacheDims& dims);
double inject_ops(const CacheDims& dims);

// ---------------------------------------------------------------- inject

struct InjectResult {
    KVCache cache;
    double duration_ms = 0.0;
};

// Reconstructs the full-precision cache. Only the dequantization is timed.
InjectResult inject_card(const CacheCard& card, const std::string& receiver_model_id, const StageClock& clock = {});

// ---------------------------------------------------------------- chain

enum class HandoffMethod { fp16_share, uniform_q4, uniform_q8, adaptive_local, adaptive_topology };
enum class HopPolicy { requantize_each_hop, pass_through };
enum class SolverKind { automatic, exact, greedy, controller };

std::string_view to_string(HandoffMethod m);
std::string_view to_string(HopPolicy p);
std::string_view to_string(SolverKind s);
HandoffMethod parse_method(std::string_view s);
HopPolicy parse_policy(std::string_view s);
SolverKind parse_solver(std::string_view s);
bool is_adaptive(HandoffMethod m);

struct ChainConfig {
    std::uint64_t seed = 0;
    double budget_bits_per_token = 4.0;  // adaptive methods
    double alpha = 0.5;                  // adaptive_topology; adaptive_local uses 1
    SolverKind solver = SolverKind::automatic;
    ErrorMode error_mode = ErrorMode::measured;
    std::uint32_t group_size = default_group_size;
    std::uint32_t eval_queries = 16;
    std::uint32_t probe_queries = 8;
    std::uint32_t append_tokens = 0;  // synthetic tokens appended per hop
    std::size_t anchor_capacity = 16;
    SegmentPriors priors;
    std::optional<SegmentMap> segments;  // default_layout when absent
    double temperature = 1.0;
    bool use_transport = false;  // send every card through an in-memory frame stream
    StageClock clock;
    std::optional<ControllerWeights> controller;  // required for SolverKind::controller
};

struct StageTimes {
    double create_card_ms = 0.0;
    double inject_ms = 0.0;
    double generate_ms = 0.0;

    friend bool operator==(const StageTimes&, const StageTimes&) = default;
};

struct HopReport {
    std::size_t hop = 0;  // 1-based
    std::string method;
    std::string from_agent;
    std::string to_agent;
    double average_bits = 0.0;
    double output_relative_error = 0.0;
    std::uint64_t card_bytes = 0;
    std::uint32_t card_crc = 0;
    // Weighted objective sum eps * S of the chosen assignment, and of the
    // uniform assignment at the same total budget on the same instance.
    double objective = 0.0;
    double uniform_objective = 0.0;
    StageTimes stage_times;

    friend bool operator==(const HopReport&, const HopReport&) = default;
};

// The toy receiver matching a cache's dims.
ToyModel toy_model_for(const CacheDims& dims, std::uint64_t seed, double temperature = 1.0);

// Scoring and bit allocation for one card: toy-model attention on probe
// queries gives I(t); segments and anchors give T(t). `uniform_objective`
// is the uniform assignment at the matching budget on the same scores.
struct HopPlan {
    BitAssignment chosen;
    double uniform_objective = 0.0;
};

HopPlan plan_hop(const ToyModel& model, const KVCache& current, HandoffMethod method, const ChainConfig& cfg,
                 const SegmentMap& segments, const AnchorPool& pool, std::uint64_t probe_seed);

// Runs the k-agent chain and returns k - 1 hop reports.
std::vector<HopReport> run_chain(const TopologyGraph& graph, const KVCache& source, HandoffMethod method, HopPolicy policy,
                                 const ChainConfig& cfg);

// ---------------------------------------------------------------- density

// floor((device - overhead) / (2 * L * H * n * d * bytes_per_element)).
std::uint64_t density_calculator(double device_bytes, double weight_overhead_bytes, const CacheDims& dims,
                                 double bytes_per_element);

}  // namespace qkv
