#include "qkv/handoff.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "qkv/rng.hpp"
#include "qkv/transport.hpp"

namespace qkv {

namespace {

// FNV-1a, used to turn stream names into derive_seed labels.
constexpr std::uint64_t label(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------- topology

void TopologyGraph::validate() const {
    std::set<std::string> ids;
    for (const auto& a : agents) {
        require(!a.id.empty() && !a.model.empty(), ErrorCode::parameter, "agent id and model must be non-empty");
        if (!ids.insert(a.id).second) fail(ErrorCode::parameter, "duplicate agent id '" + a.id + "'");
    }
    for (const auto& [from, to] : edges) {
        if (!ids.count(from) || !ids.count(to)) fail(ErrorCode::parameter, "edge " + from + " -> " + to + " references an unknown agent");
        if (from == to) fail(ErrorCode::parameter, "self edge on '" + from + "'");
    }
    if (kind == TopologyKind::chain && !is_simple_chain()) fail(ErrorCode::unsupported_topology, "graph tagged chain is not a simple path");
}

bool TopologyGraph::is_simple_chain() const {
    if (agents.size() < 2 || edges.size() != agents.size() - 1) return false;
    std::map<std::string, int> indeg, outdeg;
    std::map<std::string, std::string> next;
    for (const auto& [from, to] : edges) {
        ++outdeg[from];
        ++indeg[to];
        next[from] = to;
    }
    std::string head;
    for (const auto& a : agents) {
        if (indeg[a.id] > 1 || outdeg[a.id] > 1) return false;
        if (indeg[a.id] == 0) {
            if (!head.empty()) return false;
            head = a.id;
        }
    }
    if (head.empty()) return false;
    std::size_t visited = 1;
    std::set<std::string> seen{head};
    for (auto it = next.find(head); it != next.end(); it = next.find(it->second)) {
        if (!seen.insert(it->second).second) return false;
        ++visited;
    }
    return visited == agents.size();
}

std::vector<AgentSpec> TopologyGraph::chain_order() const {
    if (!is_simple_chain()) fail(ErrorCode::unsupported_topology, "only simple chains are supported");
    std::map<std::string, std::string> next;
    std::set<std::string> has_pred;
    for (const auto& [from, to] : edges) {
        next[from] = to;
        has_pred.insert(to);
    }
    std::map<std::string, const AgentSpec*> by_id;
    for (const auto& a : agents) by_id[a.id] = &a;
    std::string cur;
    for (const auto& a : agents)
        if (!has_pred.count(a.id)) cur = a.id;
    std::vector<AgentSpec> order;
    while (true) {
        order.push_back(*by_id.at(cur));
        auto it = next.find(cur);
        if (it == next.end()) break;
        cur = it->second;
    }
    return order;
}

TopologyGraph TopologyGraph::chain(std::size_t agents, const std::string& model) {
    require(agents >= 2, ErrorCode::parameter, "a chain needs at least two agents");
    TopologyGraph g;
    for (std::size_t i = 0; i < agents; ++i) g.agents.push_back({"agent" + std::to_string(i), model});
    for (std::size_t i = 0; i + 1 < agents; ++i) g.edges.emplace_back(g.agents[i].id, g.agents[i + 1].id);
    return g;
}

TopologyGraph TopologyGraph::parse(std::string_view text) {
    TopologyGraph g;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "agent" && tok.size() == 3) {
            g.agents.push_back({std::string(tok[1]), std::string(tok[2])});
        } else if (tok[0] == "edge" && tok.size() == 3) {
            g.edges.emplace_back(std::string(tok[1]), std::string(tok[2]));
        } else {
            fail(ErrorCode::data, "topology line " + std::to_string(line_no) + ": expected 'agent <id> <model>' or 'edge <from> <to>'");
        }
        if (nl == text.size()) break;
    }
    g.kind = TopologyKind::tree;
    g.validate();
    if (g.is_simple_chain()) g.kind = TopologyKind::chain;
    return g;
}

std::string TopologyGraph::to_text() const {
    std::ostringstream os;
    for (const auto& a : agents) os << "agent " << a.id << ' ' << a.model << '\n';
    for (const auto& [from, to] : edges) os << "edge " << from << ' ' << to << '\n';
    return os.str();
}

// ---------------------------------------------------------------- clock

double StageClock::time(const std::function<void()>& work, double modeled_ops) const {
    if (mode == ClockMode::model) {
        work();
        return modeled_ops / model_ops_per_ms;
    }
    const auto t0 = std::chrono::steady_clock::now();
    work();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

// min/max scan, code computation and packing for each of the two tensors.
double create_card_ops(const CacheDims& dims) { return 6.0 * static_cast<double>(dims.elements()); }

double inject_ops(const CacheDims& dims) { return 2.0 * static_cast<double>(dims.elements()); }

// ---------------------------------------------------------------- inject

InjectResult inject_card(const CacheCard& card, const std::string& receiver_model_id, const StageClock& clock) {
    if (card.header.model_id != receiver_model_id)
        fail(ErrorCode::compatibility, "card built for model '" + card.header.model_id + "' cannot be injected into '" + receiver_model_id + "'");
    InjectResult r;
    r.duration_ms = clock.time([&] { r.cache = dequantize_cache(card.kv); }, inject_ops(card.kv.dims));
    return r;
}

// ---------------------------------------------------------------- enums

std::string_view to_string(HandoffMethod m) {
    switch (m) {
        case HandoffMethod::fp16_share: return "fp16_share";
        case HandoffMethod::uniform_q4: return "uniform_q4";
        case HandoffMethod::uniform_q8: return "uniform_q8";
        case HandoffMethod::adaptive_local: return "adaptive_local";
        case HandoffMethod::adaptive_topology: return "adaptive_topology";
    }
    return "?";
}

std::string_view to_string(HopPolicy p) {
    return p == HopPolicy::pass_through ? "pass_through" : "requantize_each_hop";
}

std::string_view to_string(SolverKind s) {
    switch (s) {
        case SolverKind::automatic: return "auto";
        case SolverKind::exact: return "exact";
        case SolverKind::greedy: return "greedy";
        case SolverKind::controller: return "controller";
    }
    return "?";
}

HandoffMethod parse_method(std::string_view s) {
    for (auto m : {HandoffMethod::fp16_share, HandoffMethod::uniform_q4, HandoffMethod::uniform_q8, HandoffMethod::adaptive_local,
                   HandoffMethod::adaptive_topology})
        if (s == to_string(m)) return m;
    fail(ErrorCode::parameter, "unknown handoff method '" + std::string(s) + "'");
}

HopPolicy parse_policy(std::string_view s) {
    if (s == "pass_through") return HopPolicy::pass_through;
    if (s == "requantize_each_hop") return HopPolicy::requantize_each_hop;
    fail(ErrorCode::parameter, "unknown hop policy '" + std::string(s) + "'");
}

SolverKind parse_solver(std::string_view s) {
    for (auto k : {SolverKind::automatic, SolverKind::exact, SolverKind::greedy, SolverKind::controller})
        if (s == to_string(k)) return k;
    fail(ErrorCode::parameter, "unknown solver '" + std::string(s) + "'");
}

bool is_adaptive(HandoffMethod m) { return m == HandoffMethod::adaptive_local || m == HandoffMethod::adaptive_topology; }

// ---------------------------------------------------------------- chain

ToyModel toy_model_for(const CacheDims& dims, std::uint64_t seed, double temperature) {
    ToyModelConfig c;
    c.layers = dims.layers;
    c.heads = dims.heads;
    c.head_dim = dims.head_dim;
    c.seed = seed;
    c.temperature = temperature;
    return ToyModel(c);
}

namespace {

// Largest legal width not above `bits_per_token`.
BitWidth uniform_width_for_budget(double bits_per_token) {
    BitWidth w = BitWidth::b2;
    for (auto b : all_bit_widths)
        if (bits_of(b) <= bits_per_token) w = b;
    return w;
}

// Appends `count` synthetic tokens to a cache; the new rows are Gaussian
// with the RMS of the existing keys / values.
KVCache append_synthetic(const KVCache& c, std::uint32_t count, std::uint64_t seed) {
    const CacheDims& d = c.dims();
    CacheDims nd = d;
    nd.tokens = d.tokens + count;
    auto rms = [](std::span<const float> x) {
        double s = 0.0;
        for (float v : x) s += static_cast<double>(v) * v;
        return x.empty() ? 1.0 : std::sqrt(s / static_cast<double>(x.size()));
    };
    const double ks = rms(c.keys()), vs = rms(c.values());
    KVCache out(nd);
    SplitMix64 krng(derive_seed(seed, label("append.keys")));
    SplitMix64 vrng(derive_seed(seed, label("append.values")));
    for (std::uint32_t l = 0; l < d.layers; ++l)
        for (std::uint32_t h = 0; h < d.heads; ++h) {
            for (std::uint32_t t = 0; t < d.tokens; ++t) {
                std::ranges::copy(c.key_row(l, h, t), out.key_row(l, h, t).begin());
                std::ranges::copy(c.value_row(l, h, t), out.value_row(l, h, t).begin());
            }
            for (std::uint32_t t = d.tokens; t < nd.tokens; ++t) {
                for (float& v : out.key_row(l, h, t)) v = static_cast<float>(ks * krng.standard_normal());
                for (float& v : out.value_row(l, h, t)) v = static_cast<float>(vs * vrng.standard_normal());
            }
        }
    return out;
}

// Appended tokens are receiver-side conversation.
SegmentMap extend_segments(const SegmentMap& m, std::uint32_t tokens) {
    auto spans = m.spans();
    if (spans.back().kind == SegmentKind::conversation)
        spans.back().end = tokens;
    else
        spans.push_back({m.tokens(), tokens, SegmentKind::conversation});
    return SegmentMap(std::move(spans), tokens);
}

std::vector<double> token_quality(std::uint64_t seed, std::uint32_t tokens) {
    SplitMix64 rng(derive_seed(seed, label("quality")));
    std::vector<double> q(tokens);
    for (auto& v : q) v = rng.uniform();
    return q;
}

}  // namespace

HopPlan plan_hop(const ToyModel& model, const KVCache& current, HandoffMethod method, const ChainConfig& cfg,
                 const SegmentMap& segments, const AnchorPool& pool, std::uint64_t probe_seed) {
    const std::uint32_t n = current.tokens();
    require(segments.tokens() == n, ErrorCode::dimension, "segment map length differs from the cache");
    const double alpha = method == HandoffMethod::adaptive_local ? 1.0 : cfg.alpha;
    const Matrix probe = random_matrix(cfg.probe_queries, current.head_dim(), probe_seed);
    AttentionStats stats = model.observe(current, probe);
    const std::vector<double> quality = token_quality(cfg.seed, n);
    stats.quality = quality;
    const auto local = local_importance(stats);
    std::vector<double> demand(n, 0.0);
    if (method != HandoffMethod::adaptive_local) demand = downstream_demand(anchor_embeddings(current), pool, segments, cfg.priors);
    const auto scores = combine_scores(local, demand, alpha);
    const ErrorTable table = build_error_table(current, cfg.error_mode, cfg.group_size);

    HopPlan plan;
    double uniform_bits = 4.0;
    switch (method) {
        case HandoffMethod::fp16_share:
            plan.chosen = uniform_assignment(n, BitWidth::b16, scores.combined, table);
            uniform_bits = 16.0;
            break;
        case HandoffMethod::uniform_q4:
            plan.chosen = uniform_assignment(n, BitWidth::b4, scores.combined, table);
            break;
        case HandoffMethod::uniform_q8:
            plan.chosen = uniform_assignment(n, BitWidth::b8, scores.combined, table);
            uniform_bits = 8.0;
            break;
        case HandoffMethod::adaptive_local:
        case HandoffMethod::adaptive_topology: {
            const double budget = cfg.budget_bits_per_token * n;
            uniform_bits = cfg.budget_bits_per_token;
            SolverKind solver = cfg.solver;
            if (solver == SolverKind::automatic) solver = n <= exact_token_cap ? SolverKind::exact : SolverKind::greedy;
            if (solver == SolverKind::exact) {
                plan.chosen = allocate_exact(scores.combined, table, budget);
            } else if (solver == SolverKind::greedy) {
                plan.chosen = allocate_greedy(scores.combined, table, budget);
            } else {
                require(cfg.controller.has_value(), ErrorCode::parameter, "controller solver needs controller weights");
                const auto feats = compute_features(stats, segments, demand);
                plan.chosen = make_assignment(controller_infer(feats, *cfg.controller), scores.combined, table);
            }
            break;
        }
    }
    plan.uniform_objective = uniform_assignment(n, uniform_width_for_budget(uniform_bits), scores.combined, table).objective_value;
    return plan;
}

std::vector<HopReport> run_chain(const TopologyGraph& graph, const KVCache& source, HandoffMethod method, HopPolicy policy,
                                 const ChainConfig& cfg) {
    graph.validate();
    const auto order = graph.chain_order();
    require(source.dims().valid(), ErrorCode::parameter, "source cache is empty");
    require(cfg.alpha >= 0.0 && cfg.alpha <= 1.0, ErrorCode::parameter, "alpha must lie in [0, 1]");
    require(cfg.eval_queries >= 1 && cfg.probe_queries >= 1, ErrorCode::parameter, "query counts must be >= 1");
    if (cfg.solver == SolverKind::controller && is_adaptive(method))
        require(cfg.controller.has_value(), ErrorCode::parameter, "controller solver needs controller weights");
    source.check_finite();

    const std::uint32_t d = source.head_dim();
    const ToyModel model = toy_model_for(source.dims(), derive_seed(cfg.seed, label("toy")), cfg.temperature);
    const Matrix eval = random_matrix(cfg.eval_queries, d, derive_seed(cfg.seed, label("eval")));

    SegmentMap segments = cfg.segments ? *cfg.segments : SegmentMap::default_layout(source.tokens());
    require(segments.tokens() == source.tokens(), ErrorCode::dimension, "segment map length differs from the cache");

    KVCache reference = source;
    KVCache current = source;
    Matrix reference_out = model.forward(reference, eval);
    AnchorPool pool;
    pool.capacity = cfg.anchor_capacity;
    Bytes card_bytes;
    CacheCard card;

    std::vector<HopReport> reports;
    for (std::size_t hop = 1; hop < order.size(); ++hop) {
        const AgentSpec& sender = order[hop - 1];
        const AgentSpec& receiver = order[hop];
        HopReport rep;
        rep.hop = hop;
        rep.method = std::string(to_string(method));
        rep.from_agent = sender.id;
        rep.to_agent = receiver.id;

        const bool rebuild = hop == 1 || policy == HopPolicy::requantize_each_hop;
        if (rebuild) {
            const HopPlan plan = plan_hop(model, current, method, cfg, segments, pool, derive_seed(cfg.seed, label("probe") + hop));
            const BitAssignment& chosen = plan.chosen;
            rep.objective = chosen.objective_value;
            rep.uniform_objective = plan.uniform_objective;

            rep.stage_times.create_card_ms = cfg.clock.time(
                [&] {
                    card = build_card(quantize_cache(current, chosen.bits, cfg.group_size), sender.model, sender.id);
                    card_bytes = encode_card(card);
                },
                create_card_ops(current.dims()));
        } else {
            rep.objective = reports.back().objective;
            rep.uniform_objective = reports.back().uniform_objective;
        }

        // Receiver side starts from bytes.
        Bytes received = card_bytes;
        if (cfg.use_transport) {
            MemoryStream wire(frame_encode(FrameType::card, card_bytes));
            received = frame_decode(wire).payload;
        }
        const CacheCard incoming = decode_card(received);
        InjectResult injected = inject_card(incoming, receiver.model, cfg.clock);
        rep.stage_times.inject_ms = injected.duration_ms;

        Matrix out;
        rep.stage_times.generate_ms = cfg.clock.time([&] { out = model.forward(injected.cache, eval); },
                                                     model.forward_ops(injected.cache.tokens(), eval.rows));
        rep.output_relative_error = relative_l2_error(out, reference_out);
        rep.average_bits = incoming.stats.average_bits;
        rep.card_bytes = received.size();
        rep.card_crc = card_checksum(received);
        reports.push_back(rep);

        if (hop == 1 && method == HandoffMethod::adaptive_topology) {
            // Anchors: shared-context tokens weighted by the attention the
            // receiver actually gives them, scaled to [0, 1].
            const Matrix probe = random_matrix(cfg.probe_queries, d, derive_seed(cfg.seed, label("anchor.probe")));
            const AttentionStats seen = model.observe(injected.cache, probe);
            const auto emb = anchor_embeddings(injected.cache);
            const double peak = *std::ranges::max_element(seen.received_weight);
            std::vector<std::vector<double>> keys;
            std::vector<double> weights;
            for (std::uint32_t t = 0; t < injected.cache.tokens(); ++t) {
                if (segments.kind_at(t) == SegmentKind::agent_private) continue;
                keys.push_back(emb[t]);
                weights.push_back(peak > 0.0 ? seen.received_weight[t] / peak : 0.0);
            }
            pool = update_anchor_pool(pool, keys, weights);
        }

        if (policy == HopPolicy::requantize_each_hop) {
            current = std::move(injected.cache);
            if (cfg.append_tokens > 0 && hop + 1 < order.size()) {
                const std::uint64_t s = derive_seed(cfg.seed, label("append") + hop);
                const std::uint32_t n_new = current.tokens() + cfg.append_tokens;
                // The receiver generates the same tokens in both worlds.
                current = append_synthetic(current, cfg.append_tokens, s);
                reference = append_synthetic(reference, cfg.append_tokens, s);
                reference_out = model.forward(reference, eval);
                segments = extend_segments(segments, n_new);
            }
        }
    }
    return reports;
}

// ---------------------------------------------------------------- density

std::uint64_t density_calculator(double device_bytes, double weight_overhead_bytes, const CacheDims& dims, double bytes_per_element) {
    require(std::isfinite(device_bytes) && device_bytes >= 0.0, ErrorCode::parameter, "device bytes must be >= 0");
    require(std::isfinite(weight_overhead_bytes) && weight_overhead_bytes >= 0.0, ErrorCode::parameter, "overhead must be >= 0");
    require(weight_overhead_bytes <= device_bytes, ErrorCode::parameter, "weight overhead exceeds device memory");
    require(dims.valid(), ErrorCode::parameter, "dims must be >= 1");
    require(std::isfinite(bytes_per_element) && bytes_per_element > 0.0, ErrorCode::parameter, "bytes per element must be > 0");
    const long double per_context = 2.0L * dims.layers * dims.heads * dims.tokens * dims.head_dim * bytes_per_element;
    const long double free_bytes = static_cast<long double>(device_bytes) - static_cast<long double>(weight_overhead_bytes);
    return static_cast<std::uint64_t>(std::floor(free_bytes / per_context));
}

}  // namespace qkv
