#include "qkv/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "json.hpp"

#include "qkv/rng.hpp"

namespace qkv {

using ojson = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t stream_timing = 0x7431;
constexpr std::uint64_t stream_sweep = 0x5357;

std::string context_label(std::uint32_t tokens) {
    switch (tokens) {
        case 476: return "1K";
        case 1939: return "4K";
        case 3877: return "8K";
        default: return std::to_string(tokens);
    }
}

}  // namespace

double median(std::vector<double> xs) {
    require(!xs.empty(), ErrorCode::parameter, "median of an empty sample");
    std::ranges::sort(xs);
    const std::size_t m = xs.size() / 2;
    return xs.size() % 2 ? xs[m] : (xs[m - 1] + xs[m]) / 2.0;
}

// ---------------------------------------------------------------- stage timing

void StageTimingConfig::validate() const {
    require(trials >= 2, ErrorCode::parameter, "stage timing needs at least 2 trials");
    require(!contexts.empty(), ErrorCode::parameter, "no contexts requested");
    for (auto c : contexts) require(c >= 1, ErrorCode::parameter, "context sizes must be >= 1");
    require(layers >= 1 && heads >= 1 && head_dim >= 1 && group_size >= 1, ErrorCode::parameter, "toy dims must be >= 1");
}

std::vector<StageTimingReport> run_stage_timing(const StageTimingConfig& cfg) {
    cfg.validate();
    std::vector<StageTimingReport> out;
    for (std::uint32_t n : cfg.contexts) {
        const CacheDims dims{cfg.layers, cfg.heads, n, cfg.head_dim};
        const ToyModel model = toy_model_for(dims, derive_seed(cfg.seed, stream_timing));
        const std::vector<BitWidth> q4(n, BitWidth::b4);
        std::vector<double> create, inject, generate, reprefill;
        for (std::size_t trial = 0; trial <= cfg.trials; ++trial) {  // trial 0 is the warmup
            const std::uint64_t s = derive_seed(derive_seed(cfg.seed, n), trial);
            const Matrix embeddings = random_matrix(n, cfg.head_dim, derive_seed(s, 1));
            const Matrix query = random_matrix(1, cfg.head_dim, derive_seed(s, 2));

            KVCache prefilled;
            Matrix sink;
            const double t_reprefill = cfg.clock.time(
                [&] {
                    prefilled = model.prefill(embeddings);
                    sink = model.forward(prefilled, query);
                },
                model.prefill_ops(n) + model.forward_ops(n, 1));

            Bytes encoded;
            const double t_create = cfg.clock.time(
                [&] { encoded = encode_card(build_card(quantize_cache(prefilled, q4, cfg.group_size), model.model_id(), "sender")); },
                create_card_ops(dims));

            const CacheCard card = decode_card(encoded);
            InjectResult injected = inject_card(card, model.model_id(), cfg.clock);
            const double t_generate = cfg.clock.time([&] { sink = model.forward(injected.cache, query); }, model.forward_ops(n, 1));

            if (trial == 0) continue;
            reprefill.push_back(t_reprefill);
            create.push_back(t_create);
            inject.push_back(injected.duration_ms);
            generate.push_back(t_generate);
        }
        StageTimingReport r;
        r.context = context_label(n);
        r.tokens = n;
        r.trials = cfg.trials;
        r.create_card_median_ms = median(create);
        r.inject_median_ms = median(inject);
        r.generate_median_ms = median(generate);
        r.reprefill_median_ms = median(reprefill);
        r.handoff_ttft_ms = r.inject_median_ms + r.generate_median_ms;
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------- sweep

void SweepConfig::validate() const {
    require(!methods.empty() && !hops.empty() && !budgets.empty() && !seeds.empty(), ErrorCode::parameter,
            "sweep needs methods, hops, budgets and seeds");
    for (auto h : hops) require(h >= 1, ErrorCode::parameter, "hop counts must be >= 1");
    for (auto b : budgets) require(b >= 2.0, ErrorCode::parameter, "budgets must be >= 2 bits per token");
    cache.validate();
}

SweepReport run_error_sweep(const SweepConfig& cfg) {
    cfg.validate();
    const std::size_t max_hops = *std::ranges::max_element(cfg.hops);
    const TopologyGraph graph = TopologyGraph::chain(max_hops + 1, "toy-v1");

    SweepReport rep;
    rep.policy = std::string(to_string(cfg.policy));
    rep.tokens = cfg.cache.tokens;
    rep.seeds = cfg.seeds;

    for (auto method : cfg.methods) {
        // runs[budget][seed] -> hop reports
        std::vector<std::vector<std::vector<HopReport>>> runs;
        for (double budget : cfg.budgets) {
            auto& per_seed = runs.emplace_back();
            for (auto seed : cfg.seeds) {
                SyntheticConfig sc = cfg.cache;
                sc.seed = derive_seed(seed, stream_sweep);
                const KVCache source = generate_synthetic_cache(sc);
                ChainConfig cc = cfg.chain;
                cc.seed = seed;
                cc.budget_bits_per_token = budget;
                per_seed.push_back(run_chain(graph, source, method, cfg.policy, cc));
            }
        }
        for (std::size_t h : cfg.hops)
            for (std::size_t b = 0; b < cfg.budgets.size(); ++b) {
                SweepCell cell;
                cell.method = std::string(to_string(method));
                cell.hops = h;
                cell.budget_bits = cfg.budgets[b];
                cell.trials = cfg.seeds.size();
                double err = 0, bytes = 0, bits = 0, obj = 0, uobj = 0;
                for (const auto& hops : runs[b]) {
                    const HopReport& r = hops[h - 1];
                    err += r.output_relative_error;
                    cell.max_error = std::max(cell.max_error, r.output_relative_error);
                    bytes += static_cast<double>(r.card_bytes);
                    bits += r.average_bits;
                    obj += r.objective;
                    uobj += r.uniform_objective;
                    if (r.objective <= r.uniform_objective) ++cell.objective_dominates;
                }
                const auto t = static_cast<double>(cell.trials);
                cell.mean_error = err / t;
                cell.mean_card_bytes = bytes / t;
                cell.mean_average_bits = bits / t;
                cell.mean_objective = obj / t;
                cell.mean_uniform_objective = uobj / t;
                rep.cells.push_back(cell);
            }
    }
    return rep;
}

// ---------------------------------------------------------------- reports

ReportFormat parse_format(std::string_view s) {
    if (s == "json") return ReportFormat::json;
    if (s == "csv") return ReportFormat::csv;
    fail(ErrorCode::parameter, "unknown report format '" + std::string(s) + "'");
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

namespace {

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

template <class... Ts>
std::string csv_row(const Ts&... fields) {
    std::string out;
    auto add = [&](const auto& f) {
        if (!out.empty()) out += ',';
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, double>)
            out += format_number(f);
        else if constexpr (std::is_arithmetic_v<F>)
            out += std::to_string(f);
        else
            out += csv_field(f);
    };
    (add(fields), ...);
    return out + "\n";
}

std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

ojson parse_json(std::string_view text) {
    try {
        return ojson::parse(text);
    } catch (const ojson::exception& e) {
        fail(ErrorCode::data, std::string("report is not valid JSON: ") + e.what());
    }
}

template <class T>
T field(const ojson& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const ojson::exception& e) {
        fail(ErrorCode::data, std::string("report field '") + key + "': " + e.what());
    }
}

const ojson& member(const ojson& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorCode::data, std::string("report is missing '") + key + "'");
    return j[key];
}

}  // namespace

std::string render(const std::vector<StageTimingReport>& reports, ReportFormat f) {
    if (f == ReportFormat::csv) {
        std::string out = std::string(timing_csv_header) + "\n";
        for (const auto& r : reports)
            out += csv_row(r.context, r.tokens, r.trials, r.create_card_median_ms, r.inject_median_ms, r.generate_median_ms,
                           r.reprefill_median_ms, r.handoff_ttft_ms);
        return out;
    }
    ojson arr = ojson::array();
    for (const auto& r : reports)
        arr.push_back({{"context", r.context},
                       {"tokens", r.tokens},
                       {"trials", r.trials},
                       {"create_card_median_ms", r.create_card_median_ms},
                       {"inject_median_ms", r.inject_median_ms},
                       {"generate_median_ms", r.generate_median_ms},
                       {"reprefill_median_ms", r.reprefill_median_ms},
                       {"handoff_ttft_ms", r.handoff_ttft_ms}});
    return dump({{"report", "stage_timing"}, {"contexts", arr}});
}

std::string render(const SweepReport& rep, ReportFormat f) {
    if (f == ReportFormat::csv) {
        std::string out = std::string(sweep_csv_header) + "\n";
        for (const auto& c : rep.cells)
            out += csv_row(c.method, c.hops, c.budget_bits, c.trials, c.mean_error, c.max_error, c.mean_card_bytes, c.mean_average_bits,
                           c.mean_objective, c.mean_uniform_objective, c.objective_dominates);
        return out;
    }
    ojson cells = ojson::array();
    for (const auto& c : rep.cells)
        cells.push_back({{"method", c.method},
                         {"hops", c.hops},
                         {"budget_bits", c.budget_bits},
                         {"trials", c.trials},
                         {"mean_error", c.mean_error},
                         {"max_error", c.max_error},
                         {"mean_card_bytes", c.mean_card_bytes},
                         {"mean_average_bits", c.mean_average_bits},
                         {"mean_objective", c.mean_objective},
                         {"mean_uniform_objective", c.mean_uniform_objective},
                         {"objective_dominates", c.objective_dominates}});
    return dump({{"report", "error_sweep"}, {"policy", rep.policy}, {"tokens", rep.tokens}, {"seeds", rep.seeds}, {"cells", cells}});
}

std::string render(const std::vector<HopReport>& reports, ReportFormat f) {
    if (f == ReportFormat::csv) {
        std::string out = std::string(hop_csv_header) + "\n";
        for (const auto& r : reports)
            out += csv_row(r.hop, r.method, r.from_agent, r.to_agent, r.average_bits, r.output_relative_error, r.card_bytes, r.card_crc,
                           r.objective, r.uniform_objective, r.stage_times.create_card_ms, r.stage_times.inject_ms,
                           r.stage_times.generate_ms);
        return out;
    }
    ojson arr = ojson::array();
    for (const auto& r : reports)
        arr.push_back({{"hop", r.hop},
                       {"method", r.method},
                       {"from", r.from_agent},
                       {"to", r.to_agent},
                       {"average_bits", r.average_bits},
                       {"output_relative_error", r.output_relative_error},
                       {"card_bytes", r.card_bytes},
                       {"card_crc", r.card_crc},
                       {"objective", r.objective},
                       {"uniform_objective", r.uniform_objective},
                       {"stage_times",
                        {{"create_card_ms", r.stage_times.create_card_ms},
                         {"inject_ms", r.stage_times.inject_ms},
                         {"generate_ms", r.stage_times.generate_ms}}}});
    return dump({{"report", "handoff"}, {"hops", arr}});
}

std::vector<StageTimingReport> parse_timing_json(std::string_view text) {
    const ojson j = parse_json(text);
    std::vector<StageTimingReport> out;
    for (const auto& c : member(j, "contexts")) {
        StageTimingReport r;
        r.context = field<std::string>(c, "context");
        r.tokens = field<std::uint32_t>(c, "tokens");
        r.trials = field<std::size_t>(c, "trials");
        r.create_card_median_ms = field<double>(c, "create_card_median_ms");
        r.inject_median_ms = field<double>(c, "inject_median_ms");
        r.generate_median_ms = field<double>(c, "generate_median_ms");
        r.reprefill_median_ms = field<double>(c, "reprefill_median_ms");
        r.handoff_ttft_ms = field<double>(c, "handoff_ttft_ms");
        out.push_back(r);
    }
    return out;
}

SweepReport parse_sweep_json(std::string_view text) {
    const ojson j = parse_json(text);
    SweepReport rep;
    rep.policy = field<std::string>(j, "policy");
    rep.tokens = field<std::uint32_t>(j, "tokens");
    rep.seeds = field<std::vector<std::uint64_t>>(j, "seeds");
    for (const auto& c : member(j, "cells")) {
        SweepCell cell;
        cell.method = field<std::string>(c, "method");
        cell.hops = field<std::size_t>(c, "hops");
        cell.budget_bits = field<double>(c, "budget_bits");
        cell.trials = field<std::size_t>(c, "trials");
        cell.mean_error = field<double>(c, "mean_error");
        cell.max_error = field<double>(c, "max_error");
        cell.mean_card_bytes = field<double>(c, "mean_card_bytes");
        cell.mean_average_bits = field<double>(c, "mean_average_bits");
        cell.mean_objective = field<double>(c, "mean_objective");
        cell.mean_uniform_objective = field<double>(c, "mean_uniform_objective");
        cell.objective_dominates = field<std::size_t>(c, "objective_dominates");
        rep.cells.push_back(cell);
    }
    return rep;
}

std::vector<HopReport> parse_hops_json(std::string_view text) {
    const ojson j = parse_json(text);
    std::vector<HopReport> out;
    for (const auto& h : member(j, "hops")) {
        HopReport r;
        r.hop = field<std::size_t>(h, "hop");
        r.method = field<std::string>(h, "method");
        r.from_agent = field<std::string>(h, "from");
        r.to_agent = field<std::string>(h, "to");
        r.average_bits = field<double>(h, "average_bits");
        r.output_relative_error = field<double>(h, "output_relative_error");
        r.card_bytes = field<std::uint64_t>(h, "card_bytes");
        r.card_crc = field<std::uint32_t>(h, "card_crc");
        r.objective = field<double>(h, "objective");
        r.uniform_objective = field<double>(h, "uniform_objective");
        const auto& st = member(h, "stage_times");
        r.stage_times.create_card_ms = field<double>(st, "create_card_ms");
        r.stage_times.inject_ms = field<double>(st, "inject_ms");
        r.stage_times.generate_ms = field<double>(st, "generate_ms");
        out.push_back(r);
    }
    return out;
}

std::size_t emit_report(std::string_view text, const std::string& path) {
    write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return text.size();
}

}  // namespace qkv
