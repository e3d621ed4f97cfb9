#include "qkv/cli.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qkv/bench.hpp"
#include "qkv/cachecard.hpp"
#include "qkv/config.hpp"
#include "qkv/controller.hpp"
#include "qkv/handoff.hpp"
#include "qkv/rng.hpp"
#include "qkv/transport.hpp"

namespace qkv {

namespace {

using ojson = nlohmann::ordered_json;

constexpr std::uint64_t toy_stream = 0x746f79;
constexpr std::uint64_t eval_stream = 0x6576616c;
constexpr std::uint64_t probe_stream = 0x70726f62;

// Every key a config file may set. Command-line flags map onto the same keys.
constexpr std::string_view known_keys[] = {
    "seed",         "format",         "layers",        "heads",         "tokens",          "head_dim",      "value_scale",
    "heavy_hitter_fraction",          "group_size",    "bits",          "method",          "policy",        "budget",
    "alpha",        "solver",         "error_mode",    "eval_queries",  "probe_queries",   "append_tokens", "anchor_capacity",
    "temperature",  "transport",      "clock",         "model_ops_per_ms", "agents",       "model",         "sender",
    "trials",       "contexts",       "seeds",         "hops",          "budgets",         "methods",       "device_bytes",
    "overhead_bytes", "bytes_per_element", "host",     "port",          "port_file",       "agent",         "threshold",
    "epochs",       "learning_rate",  "topology",      "segments",        "weights",       "in",
    "position_offset",
};

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) {
        if (c == '"') o += '"';
        o += c;
    }
    return o + "\"";
}

std::string csv_value(const ojson& v) {
    if (v.is_string()) return csv_escape(v.get<std::string>());
    if (v.is_number_float()) return format_number(v.get<double>());
    if (v.is_array()) {
        std::string s;
        for (const auto& e : v) s += (s.empty() ? "" : ";") + csv_value(e);
        return s;
    }
    return v.dump();
}

// A flat record: pretty JSON object, or a CSV header line plus one row.
std::string render_record(const ojson& rec, ReportFormat f) {
    if (f == ReportFormat::json) return rec.dump(2) + "\n";
    std::string head, row;
    bool first = true;
    for (const auto& [k, v] : rec.items()) {
        if (!first) {
            head += ',';
            row += ',';
        }
        first = false;
        head += k;
        row += csv_value(v);
    }
    return head + "\n" + row + "\n";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        const auto b = cur.find_first_not_of(' ');
        if (b == std::string::npos) continue;
        out.push_back(cur.substr(b, cur.find_last_not_of(' ') - b + 1));
    }
    return out;
}

template <class T>
T to_number(const std::string& key, const std::string& v) {
    Config c;
    c.set(key, v);
    if constexpr (std::is_floating_point_v<T>)
        return static_cast<T>(c.get_double(key, 0));
    else
        return static_cast<T>(c.get_u64(key, 0));
}

template <class T>
std::vector<T> number_list(const Config& cfg, const std::string& key, std::vector<T> fallback) {
    if (!cfg.has(key)) return fallback;
    std::vector<T> out;
    for (const auto& item : split_list(cfg.get(key, ""))) out.push_back(to_number<T>(key, item));
    require(!out.empty(), ErrorCode::parameter, "empty list");
    return out;
}

std::uint32_t u32_of(const Config& cfg, const std::string& key, std::uint32_t fallback) {
    const auto v = cfg.get_u64(key, fallback);
    require(v <= 0xFFFFFFFFULL, ErrorCode::parameter, "value too large");
    return static_cast<std::uint32_t>(v);
}

std::string text_of(const Bytes& b) { return std::string(b.begin(), b.end()); }

class Tool {
public:
    Tool(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

    int run(const std::vector<std::string>& args);

private:
    void bind(CLI::App* sc, const std::string& flag, const std::string& key, const std::string& help) {
        auto* o = sc->add_option(flag, values_[key], help);
        bound_.emplace_back(o, key);
    }
    void build();
    void merge();
    void dispatch();

    // Report to --out when given, else to the output stream.
    void emit(const std::string& text) {
        if (!out_path_.empty())
            emit_report(text, out_path_);
        else
            out_ << text;
    }
    const std::string& need_out(const char* what) const {
        if (out_path_.empty()) fail(ErrorCode::parameter, std::string(what) + " needs --out");
        return out_path_;
    }
    std::string need(const std::string& key) const {
        if (!cfg_.has(key)) fail(ErrorCode::parameter, "missing --" + key);
        return cfg_.get(key, "");
    }
    ReportFormat format() const { return parse_format(cfg_.get("format", "json")); }
    std::uint64_t seed() const { return cfg_.get_u64("seed", 0); }

    SyntheticConfig synthetic() const;
    ChainConfig chain_config() const;
    StageClock clock(ClockMode fallback) const;
    KVCache source_cache() const;

    void cmd_synth();
    void cmd_quantize();
    void cmd_card_encode();
    void cmd_card_decode();
    void cmd_card_stats();
    void cmd_handoff_run();
    void cmd_bench_ttft();
    void cmd_bench_sweep();
    void cmd_density();
    void cmd_serve();
    void cmd_send();
    void cmd_controller_train();

    std::ostream& out_;
    std::ostream& err_;
    CLI::App app_{"Quantized KV-cache handoff toolkit", "qkvctl"};
    std::map<std::string, std::string> values_;
    std::vector<std::pair<CLI::Option*, std::string>> bound_;
    std::string config_path_;
    std::string out_path_;
    Config cfg_;
    std::map<std::string, CLI::App*> cmds_;
};

void Tool::build() {
    app_.require_subcommand(1);
    app_.fallthrough();
    bind(&app_, "--seed", "seed", "Master seed");
    bind(&app_, "--format", "format", "Report format: json or csv");
    app_.add_option("--config", config_path_, "Flat key=value config file");
    app_.add_option("--out", out_path_, "Output path");

    auto dims = [&](CLI::App* sc) {
        bind(sc, "--layers", "layers", "Layers");
        bind(sc, "--heads", "heads", "Heads per layer");
        bind(sc, "--tokens", "tokens", "Tokens");
        bind(sc, "--head-dim", "head_dim", "Head dimension");
    };
    auto chain = [&](CLI::App* sc) {
        bind(sc, "--method", "method", "fp16_share|uniform_q4|uniform_q8|adaptive_local|adaptive_topology");
        bind(sc, "--budget", "budget", "Average bits per token for adaptive methods");
        bind(sc, "--alpha", "alpha", "Local/transfer mix for adaptive_topology");
        bind(sc, "--solver", "solver", "auto|exact|greedy|controller");
        bind(sc, "--error-mode", "error_mode", "analytic|measured");
        bind(sc, "--group-size", "group_size", "Quantization group size");
        bind(sc, "--weights", "weights", "Controller weights (QKVW)");
        bind(sc, "--segments", "segments", "Segment sidecar file");
    };

    auto* synth = app_.add_subcommand("synth", "Generate a synthetic cache container");
    dims(synth);
    bind(synth, "--value-scale", "value_scale", "Value scale");
    cmds_["synth"] = synth;

    auto* quant = app_.add_subcommand("quantize", "Quantize a cache uniformly and write the reconstruction");
    bind(quant, "--in", "in", "Input container");
    bind(quant, "--bits", "bits", "Bit width: 2, 4, 8 or 16");
    bind(quant, "--group-size", "group_size", "Quantization group size");
    cmds_["quantize"] = quant;

    auto* card = app_.add_subcommand("card", "CacheCard encode/decode/stats");
    card->require_subcommand(1);
    auto* enc = card->add_subcommand("encode", "Build a card from a cache container");
    bind(enc, "--in", "in", "Input container");
    chain(enc);
    bind(enc, "--model", "model", "Model id");
    bind(enc, "--sender", "sender", "Sender id");
    bind(enc, "--position-offset", "position_offset", "Position offset placeholder");
    cmds_["card encode"] = enc;
    auto* dec = card->add_subcommand("decode", "Reconstruct a cache container from a card");
    bind(dec, "--in", "in", "Input card");
    cmds_["card decode"] = dec;
    auto* stats = card->add_subcommand("stats", "Print a card's header and stats");
    bind(stats, "--in", "in", "Input card");
    cmds_["card stats"] = stats;

    auto* handoff = app_.add_subcommand("handoff", "Multi-hop handoff simulation");
    handoff->require_subcommand(1);
    auto* run = handoff->add_subcommand("run", "Run a chain and report every hop");
    bind(run, "--in", "in", "Source container (synthetic when absent)");
    dims(run);
    chain(run);
    bind(run, "--policy", "policy", "requantize_each_hop|pass_through");
    bind(run, "--agents", "agents", "Chain length when no topology is given");
    bind(run, "--topology", "topology", "Topology file");
    bind(run, "--append-tokens", "append_tokens", "Synthetic tokens appended per hop");
    bind(run, "--clock", "clock", "wall|model");
    bind(run, "--transport", "transport", "Route cards through the frame codec");
    cmds_["handoff run"] = run;

    auto* bench = app_.add_subcommand("bench", "Benchmarks");
    bench->require_subcommand(1);
    auto* ttft = bench->add_subcommand("ttft", "Stage timing versus re-prefill");
    bind(ttft, "--contexts", "contexts", "Comma-separated token counts");
    bind(ttft, "--trials", "trials", "Trials per context (>= 2)");
    bind(ttft, "--layers", "layers", "Layers");
    bind(ttft, "--heads", "heads", "Heads");
    bind(ttft, "--head-dim", "head_dim", "Head dimension");
    bind(ttft, "--clock", "clock", "wall|model");
    cmds_["bench ttft"] = ttft;
    auto* sweep = bench->add_subcommand("sweep", "Multi-hop error sweep");
    dims(sweep);
    chain(sweep);
    bind(sweep, "--methods", "methods", "Comma-separated methods");
    bind(sweep, "--hops", "hops", "Comma-separated hop counts");
    bind(sweep, "--budgets", "budgets", "Comma-separated budgets");
    bind(sweep, "--seeds", "seeds", "Number of seeded trials per cell");
    bind(sweep, "--policy", "policy", "requantize_each_hop|pass_through");
    bind(sweep, "--clock", "clock", "wall|model");
    cmds_["bench sweep"] = sweep;

    auto* density = app_.add_subcommand("density", "Concurrent contexts that fit a device");
    dims(density);
    bind(density, "--device-bytes", "device_bytes", "Device memory in bytes");
    bind(density, "--overhead-bytes", "overhead_bytes", "Weight/runtime overhead in bytes");
    bind(density, "--bytes-per-element", "bytes_per_element", "Bytes per cached element");
    cmds_["density"] = density;

    auto* serve = app_.add_subcommand("serve", "Receive cards over TCP");
    bind(serve, "--host", "host", "Listen address");
    bind(serve, "--port", "port", "Port (0 picks a free one)");
    bind(serve, "--port-file", "port_file", "Write the bound port here once listening");
    bind(serve, "--model", "model", "Receiver model id");
    bind(serve, "--agent", "agent", "Receiver agent id");
    cmds_["serve"] = serve;

    auto* send = app_.add_subcommand("send", "Send a card over TCP");
    bind(send, "--in", "in", "Card file");
    bind(send, "--host", "host", "Receiver address");
    bind(send, "--port", "port", "Receiver port");
    bind(send, "--model", "model", "Model id (defaults to the card's)");
    bind(send, "--agent", "agent", "Sender agent id");
    cmds_["send"] = send;

    auto* ctl = app_.add_subcommand("controller", "Precision controller");
    ctl->require_subcommand(1);
    auto* train = ctl->add_subcommand("train", "Train on calibration labels from synthetic caches");
    dims(train);
    bind(train, "--threshold", "threshold", "Relative output error threshold for labels");
    bind(train, "--epochs", "epochs", "Adam epochs");
    bind(train, "--learning-rate", "learning_rate", "Adam learning rate");
    bind(train, "--seeds", "seeds", "Number of calibration caches");
    cmds_["controller train"] = train;
}

void Tool::merge() {
    if (!config_path_.empty()) cfg_ = Config::load(config_path_);
    for (const auto& [key, value] : cfg_.entries())
        if (std::ranges::find(known_keys, std::string_view(key)) == std::end(known_keys))
            fail(ErrorCode::parameter, "unknown config key '" + key + "'");
    for (const auto& [opt, key] : bound_)
        if (opt->count() > 0) cfg_.set(key, values_[key]);
}

SyntheticConfig Tool::synthetic() const {
    SyntheticConfig sc;
    sc.seed = seed();
    sc.layers = u32_of(cfg_, "layers", sc.layers);
    sc.heads = u32_of(cfg_, "heads", sc.heads);
    sc.tokens = u32_of(cfg_, "tokens", sc.tokens);
    sc.head_dim = u32_of(cfg_, "head_dim", sc.head_dim);
    sc.value_scale = cfg_.get_double("value_scale", sc.value_scale);
    sc.heavy_hitter_fraction = cfg_.get_double("heavy_hitter_fraction", sc.heavy_hitter_fraction);
    return sc;
}

StageClock Tool::clock(ClockMode fallback) const {
    StageClock c;
    const std::string mode = cfg_.get("clock", fallback == ClockMode::wall ? "wall" : "model");
    if (mode == "wall")
        c.mode = ClockMode::wall;
    else if (mode == "model")
        c.mode = ClockMode::model;
    else
        fail(ErrorCode::parameter, "clock must be wall or model");
    c.model_ops_per_ms = cfg_.get_double("model_ops_per_ms", c.model_ops_per_ms);
    require(c.model_ops_per_ms > 0, ErrorCode::parameter, "model_ops_per_ms must be > 0");
    return c;
}

ChainConfig Tool::chain_config() const {
    ChainConfig c;
    c.seed = seed();
    c.budget_bits_per_token = cfg_.get_double("budget", c.budget_bits_per_token);
    c.alpha = cfg_.get_double("alpha", c.alpha);
    c.solver = parse_solver(cfg_.get("solver", "auto"));
    const std::string em = cfg_.get("error_mode", "measured");
    if (em == "measured")
        c.error_mode = ErrorMode::measured;
    else if (em == "analytic")
        c.error_mode = ErrorMode::analytic;
    else
        fail(ErrorCode::parameter, "error_mode must be analytic or measured");
    c.group_size = u32_of(cfg_, "group_size", c.group_size);
    c.eval_queries = u32_of(cfg_, "eval_queries", c.eval_queries);
    c.probe_queries = u32_of(cfg_, "probe_queries", c.probe_queries);
    c.append_tokens = u32_of(cfg_, "append_tokens", c.append_tokens);
    c.anchor_capacity = cfg_.get_u64("anchor_capacity", c.anchor_capacity);
    c.temperature = cfg_.get_double("temperature", c.temperature);
    c.use_transport = cfg_.get_bool("transport", false);
    c.clock = clock(ClockMode::wall);
    if (cfg_.has("weights")) c.controller = decode_weights(read_file(cfg_.get("weights", "")));
    return c;
}

KVCache Tool::source_cache() const {
    if (cfg_.has("in")) return load_container(cfg_.get("in", ""));
    return generate_synthetic_cache(synthetic());
}

void Tool::dispatch() {
    for (const auto& [name, sc] : cmds_) {
        if (!sc->parsed()) continue;
        if (name == "synth") return cmd_synth();
        if (name == "quantize") return cmd_quantize();
        if (name == "card encode") return cmd_card_encode();
        if (name == "card decode") return cmd_card_decode();
        if (name == "card stats") return cmd_card_stats();
        if (name == "handoff run") return cmd_handoff_run();
        if (name == "bench ttft") return cmd_bench_ttft();
        if (name == "bench sweep") return cmd_bench_sweep();
        if (name == "density") return cmd_density();
        if (name == "serve") return cmd_serve();
        if (name == "send") return cmd_send();
        if (name == "controller train") return cmd_controller_train();
    }
    fail(ErrorCode::parameter, "no command given");
}

// ---------------------------------------------------------------- commands

void Tool::cmd_synth() {
    const auto sc = synthetic();
    const KVCache cache = generate_synthetic_cache(sc);
    const std::size_t bytes = store_container(cache, need_out("synth"));
    ojson rec{{"command", "synth"}, {"seed", sc.seed},       {"layers", sc.layers},
              {"heads", sc.heads},  {"tokens", sc.tokens},   {"head_dim", sc.head_dim},
              {"bytes", bytes},     {"crc32", crc32(encode_container(cache))}};
    out_ << render_record(rec, format());
}

void Tool::cmd_quantize() {
    const KVCache cache = load_container(need("in"));
    const BitWidth bits = to_bit_width(static_cast<int>(cfg_.get_u64("bits", 4)));
    const std::uint32_t group = u32_of(cfg_, "group_size", default_group_size);
    const std::vector<BitWidth> widths(cache.tokens(), bits);
    const QuantizedKV q = quantize_cache(cache, widths, group);
    const KVCache back = dequantize_cache(q);
    double max_err = 0.0, sq = 0.0;
    auto acc = [&](std::span<const float> a, std::span<const float> b) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double e = std::abs(static_cast<double>(a[i]) - b[i]);
            max_err = std::max(max_err, e);
            sq += e * e;
        }
    };
    acc(cache.keys(), back.keys());
    acc(cache.values(), back.values());
    const std::size_t bytes = store_container(back, need_out("quantize"));
    const CardStats st = compute_stats(q);
    ojson rec{{"command", "quantize"},
              {"bits", bits_of(bits)},
              {"group_size", group},
              {"max_abs_error", max_err},
              {"rmse", std::sqrt(sq / static_cast<double>(2 * cache.dims().elements()))},
              {"payload_bytes", st.payload_bytes},
              {"compression_ratio", st.compression_ratio},
              {"bytes", bytes}};
    out_ << render_record(rec, format());
}

void Tool::cmd_card_encode() {
    const KVCache cache = load_container(need("in"));
    const ChainConfig cc = chain_config();
    const HandoffMethod method = parse_method(cfg_.get("method", "uniform_q4"));
    const ToyModel model = toy_model_for(cache.dims(), derive_seed(cc.seed, toy_stream), cc.temperature);
    SegmentMap segments = cfg_.has("segments") ? SegmentMap::parse(text_of(read_file(cfg_.get("segments", ""))), cache.tokens())
                                               : SegmentMap::default_layout(cache.tokens());
    AnchorPool pool;
    pool.capacity = cc.anchor_capacity;
    const HopPlan plan = plan_hop(model, cache, method, cc, segments, pool, derive_seed(cc.seed, probe_stream));
    const std::string offset_text = cfg_.get("position_offset", "0");
    std::int32_t offset = 0;
    const auto [end, ec] = std::from_chars(offset_text.data(), offset_text.data() + offset_text.size(), offset);
    if (ec != std::errc() || end != offset_text.data() + offset_text.size())
        fail(ErrorCode::parameter, "position_offset needs a 32-bit integer, got '" + offset_text + "'");
    const CacheCard card =
        build_card(quantize_cache(cache, plan.chosen.bits, cc.group_size), cfg_.get("model", "toy-v1"), cfg_.get("sender", "agent0"), offset);
    const Bytes bytes = encode_card(card);
    write_file(need_out("card encode"), bytes);
    ojson rec{{"command", "card encode"},
              {"method", to_string(method)},
              {"model_id", card.header.model_id},
              {"sender_id", card.header.sender_id},
              {"tokens", card.kv.dims.tokens},
              {"average_bits", card.stats.average_bits},
              {"payload_bytes", card.stats.payload_bytes},
              {"fp16_equivalent_bytes", card.stats.fp16_equivalent_bytes},
              {"compression_ratio", card.stats.compression_ratio},
              {"objective", plan.chosen.objective_value},
              {"uniform_objective", plan.uniform_objective},
              {"card_bytes", bytes.size()},
              {"crc32", card_checksum(bytes)}};
    out_ << render_record(rec, format());
}

void Tool::cmd_card_decode() {
    const CacheCard card = decode_card(read_file(need("in")));
    const KVCache cache = dequantize_cache(card.kv);
    const std::size_t bytes = store_container(cache, need_out("card decode"));
    ojson rec{{"command", "card decode"}, {"tokens", cache.tokens()}, {"bytes", bytes}, {"crc32", crc32(encode_container(cache))}};
    out_ << render_record(rec, format());
}

void Tool::cmd_card_stats() {
    const Bytes raw = read_file(need("in"));
    const CacheCard card = decode_card(raw);
    const CardStats st = card_stats(card);
    ojson rec{{"version", card.header.version},
              {"model_id", card.header.model_id},
              {"sender_id", card.header.sender_id},
              {"layers", card.kv.dims.layers},
              {"heads", card.kv.dims.heads},
              {"tokens", card.kv.dims.tokens},
              {"head_dim", card.kv.dims.head_dim},
              {"group_size", card.kv.group_size},
              {"position_offset", card.header.position_offset_placeholder},
              {"average_bits", st.average_bits},
              {"payload_bytes", st.payload_bytes},
              {"fp16_equivalent_bytes", st.fp16_equivalent_bytes},
              {"compression_ratio", st.compression_ratio},
              {"card_bytes", raw.size()}};
    emit(render_record(rec, format()));
}

void Tool::cmd_handoff_run() {
    const KVCache source = source_cache();
    ChainConfig cc = chain_config();
    if (cfg_.has("segments")) cc.segments = SegmentMap::parse(text_of(read_file(cfg_.get("segments", ""))), source.tokens());
    const std::string model = cfg_.get("model", "toy-v1");
    const TopologyGraph graph = cfg_.has("topology") ? TopologyGraph::parse(text_of(read_file(cfg_.get("topology", ""))))
                                                     : TopologyGraph::chain(cfg_.get_u64("agents", 5), model);
    const auto reports = run_chain(graph, source, parse_method(cfg_.get("method", "uniform_q4")),
                                   parse_policy(cfg_.get("policy", "requantize_each_hop")), cc);
    emit(render(reports, format()));
}

void Tool::cmd_bench_ttft() {
    StageTimingConfig sc;
    sc.seed = seed();
    sc.contexts = number_list<std::uint32_t>(cfg_, "contexts", sc.contexts);
    sc.trials = cfg_.get_u64("trials", sc.trials);
    sc.layers = u32_of(cfg_, "layers", sc.layers);
    sc.heads = u32_of(cfg_, "heads", sc.heads);
    sc.head_dim = u32_of(cfg_, "head_dim", sc.head_dim);
    sc.group_size = u32_of(cfg_, "group_size", sc.group_size);
    sc.clock = clock(ClockMode::wall);
    emit(render(run_stage_timing(sc), format()));
}

void Tool::cmd_bench_sweep() {
    SweepConfig sc;
    if (cfg_.has("methods")) {
        sc.methods.clear();
        for (const auto& m : split_list(cfg_.get("methods", ""))) sc.methods.push_back(parse_method(m));
    }
    sc.hops = number_list<std::size_t>(cfg_, "hops", sc.hops);
    sc.budgets = number_list<double>(cfg_, "budgets", sc.budgets);
    const std::uint64_t n = cfg_.get_u64("seeds", sc.seeds.size());
    require(n >= 1, ErrorCode::parameter, "seeds must be >= 1");
    sc.seeds.clear();
    for (std::uint64_t i = 0; i < n; ++i) sc.seeds.push_back(seed() + i);
    sc.policy = parse_policy(cfg_.get("policy", "requantize_each_hop"));
    SyntheticConfig cache = synthetic();
    if (!cfg_.has("tokens")) cache.tokens = sc.cache.tokens;
    sc.cache = cache;
    sc.chain = chain_config();
    emit(render(run_error_sweep(sc), format()));
}

void Tool::cmd_density() {
    const CacheDims dims{u32_of(cfg_, "layers", 32), u32_of(cfg_, "heads", 8), u32_of(cfg_, "tokens", 8192), u32_of(cfg_, "head_dim", 128)};
    const double device = cfg_.get_double("device_bytes", 12.0 * 1024 * 1024 * 1024);
    const double overhead = cfg_.get_double("overhead_bytes", 0.0);
    const double bpe = cfg_.get_double("bytes_per_element", 2.0);
    const std::uint64_t contexts = density_calculator(device, overhead, dims, bpe);
    ojson rec{{"device_bytes", device},
              {"overhead_bytes", overhead},
              {"layers", dims.layers},
              {"heads", dims.heads},
              {"tokens", dims.tokens},
              {"head_dim", dims.head_dim},
              {"bytes_per_element", bpe},
              {"context_bytes", 2.0 * static_cast<double>(dims.elements()) * bpe},
              {"contexts", contexts}};
    emit(render_record(rec, format()));
}

void Tool::cmd_serve() {
    const std::string out_path = need_out("serve");
    TcpListener listener(static_cast<std::uint16_t>(cfg_.get_u64("port", 0)), cfg_.get("host", "127.0.0.1"));
    if (cfg_.has("port_file")) {
        const std::string port = std::to_string(listener.port()) + "\n";
        write_file(cfg_.get("port_file", ""), ByteView(reinterpret_cast<const std::uint8_t*>(port.data()), port.size()));
    }
    auto stream = listener.accept();
    Handshake local{protocol_version, cfg_.get("agent", "receiver"), cfg_.get("model", "toy-v1")};
    Session session(*stream, local);
    session.accept();
    ojson cards = ojson::array();
    std::size_t index = 0;
    while (auto bytes = session.receive_card_bytes()) {
        const CacheCard card = decode_card(*bytes);  // reject corrupt cards before storing
        const std::string path = index == 0 ? out_path : out_path + "." + std::to_string(index);
        write_file(path, *bytes);
        cards.push_back({{"index", index}, {"sender_id", card.header.sender_id}, {"bytes", bytes->size()}, {"crc32", card_checksum(*bytes)}});
        ++index;
    }
    ojson rec{{"command", "serve"}, {"peer", session.remote()->agent_id}, {"model_id", local.model_id}, {"cards", index}};
    if (format() == ReportFormat::json) rec["received"] = cards;
    out_ << render_record(rec, format());
}

void Tool::cmd_send() {
    const Bytes bytes = read_file(need("in"));
    const CacheCard card = decode_card(bytes);
    const auto port = cfg_.get_u64("port", 0);
    require(port >= 1 && port <= 65535, ErrorCode::parameter, "send needs --port in 1..65535");
    auto stream = tcp_connect(cfg_.get("host", "127.0.0.1"), static_cast<std::uint16_t>(port));
    Handshake local{protocol_version, cfg_.get("agent", card.header.sender_id.empty() ? "sender" : card.header.sender_id),
                    cfg_.get("model", card.header.model_id)};
    Session session(*stream, local);
    session.connect();
    const TransferStats st = session.send_card_bytes(bytes);
    session.close();
    ojson rec{{"command", "send"}, {"peer", session.remote()->agent_id}, {"frame_bytes", st.bytes}, {"card_bytes", bytes.size()},
              {"crc32", card_checksum(bytes)}};
    out_ << render_record(rec, format());
}

void Tool::cmd_controller_train() {
    const std::string out_path = need_out("controller train");
    SyntheticConfig base = synthetic();
    const std::uint64_t caches = cfg_.get_u64("seeds", 4);
    require(caches >= 1, ErrorCode::parameter, "seeds must be >= 1");
    LabelConfig lc;
    lc.threshold = cfg_.get_double("threshold", lc.threshold);
    lc.group_size = u32_of(cfg_, "group_size", lc.group_size);
    std::vector<FeatureRow> rows;
    std::vector<BitWidth> labels;
    for (std::uint64_t i = 0; i < caches; ++i) {
        SyntheticConfig sc = base;
        sc.seed = derive_seed(seed(), i);
        const KVCache cache = generate_synthetic_cache(sc);
        const ToyModel model = toy_model_for(cache.dims(), derive_seed(seed(), toy_stream));
        AttentionStats stats = model.observe(cache, random_matrix(8, cache.head_dim(), derive_seed(sc.seed, probe_stream)));
        stats.quality = generate_attention_stats(sc, cache).quality;
        const SegmentMap segments = SegmentMap::default_layout(cache.tokens());
        const auto demand = downstream_demand(anchor_embeddings(cache), AnchorPool{}, segments);
        const auto feats = compute_features(stats, segments, demand);
        Evaluator ev{&model, random_matrix(16, cache.head_dim(), derive_seed(sc.seed, eval_stream))};
        const auto lab = label_calibration(cache, ev, lc);
        rows.insert(rows.end(), feats.rows.begin(), feats.rows.end());
        labels.insert(labels.end(), lab.begin(), lab.end());
    }
    TrainConfig tc;
    tc.seed = seed();
    tc.epochs = cfg_.get_u64("epochs", tc.epochs);
    tc.learning_rate = cfg_.get_double("learning_rate", tc.learning_rate);
    const TrainResult tr = controller_train(rows, labels, tc);
    write_file(out_path, encode_weights(tr.weights));
    std::array<std::size_t, 4> hist{};
    for (auto b : labels) ++hist[static_cast<std::size_t>(width_index(b))];
    ojson rec{{"command", "controller train"},
              {"samples", rows.size()},
              {"labels_2", hist[0]},
              {"labels_4", hist[1]},
              {"labels_8", hist[2]},
              {"labels_16", hist[3]},
              {"final_loss", tr.final_loss},
              {"training_accuracy", tr.training_accuracy},
              {"parameters", ControllerWeights::parameter_count}};
    out_ << render_record(rec, format());
}

int Tool::run(const std::vector<std::string>& args) {
    build();
    std::vector<std::string> argv_store;
    argv_store.reserve(args.size() + 1);
    argv_store.push_back("qkvctl");
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    try {
        app_.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app_.exit(e, out_, err_);
        return code == 0 ? exit_ok : exit_usage;
    }
    try {
        merge();
        dispatch();
        return exit_ok;
    } catch (const Error& e) {
        err_ << "error: " << e.what() << "\n";
        switch (classify(e.code())) {
            case ErrorClass::usage: return exit_usage;
            case ErrorClass::protocol: return exit_protocol;
            case ErrorClass::data: return exit_data;
        }
        return exit_data;
    } catch (const std::exception& e) {
        err_ << "error: " << e.what() << "\n";
        return exit_data;
    }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        Tool tool(out, err);
        return tool.run(args);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_data;
    }
}

}  // namespace qkv
