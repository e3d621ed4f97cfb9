#include "qkv/importance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace qkv {

std::string_view to_string(SegmentKind kind) {
    switch (kind) {
        case SegmentKind::system: return "system";
        case SegmentKind::shared_doc: return "shared_doc";
        case SegmentKind::conversation: return "conversation";
        case SegmentKind::shared_state: return "shared_state";
        case SegmentKind::agent_private: return "agent_private";
    }
    return "agent_private";
}

SegmentKind parse_segment_kind(std::string_view name) {
    for (int k = 0; k <= 4; ++k) {
        auto kind = static_cast<SegmentKind>(k);
        if (to_string(kind) == name) return kind;
    }
    fail(ErrorCode::data, "unknown segment kind '" + std::string(name) + "'");
}

SegmentMap::SegmentMap(std::vector<SegmentSpan> spans, std::uint32_t tokens) : spans_(std::move(spans)), tokens_(tokens) {
    std::uint32_t next = 0;
    for (const auto& s : spans_) {
        if (s.start != next || s.end <= s.start)
            fail(ErrorCode::data, "segment spans must be sorted, non-empty and contiguous");
        next = s.end;
    }
    if (next != tokens_) fail(ErrorCode::data, "segment spans do not cover every token");
}

SegmentMap SegmentMap::uniform(std::uint32_t tokens, SegmentKind kind) { return SegmentMap({{0, tokens, kind}}, tokens); }

SegmentMap SegmentMap::default_layout(std::uint32_t tokens) {
    constexpr std::array<std::pair<SegmentKind, std::uint32_t>, 5> eighths{{{SegmentKind::system, 1},
                                                                            {SegmentKind::shared_doc, 3},
                                                                            {SegmentKind::conversation, 2},
                                                                            {SegmentKind::shared_state, 1},
                                                                            {SegmentKind::agent_private, 1}}};
    std::vector<SegmentSpan> spans;
    std::uint32_t start = 0, cumulative = 0;
    for (auto [kind, share] : eighths) {
        cumulative += share;
        auto end = static_cast<std::uint32_t>(std::uint64_t{tokens} * cumulative / 8);
        if (end > start) spans.push_back({start, end, kind});
        start = std::max(start, end);
    }
    return SegmentMap(std::move(spans), tokens);
}

SegmentMap SegmentMap::parse(std::string_view text, std::uint32_t tokens) {
    std::vector<SegmentSpan> spans;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream fields(line);
        std::int64_t start = 0, end = 0;
        std::string kind;
        if (!(fields >> start)) continue;  // blank line
        if (!(fields >> end >> kind) || start < 0 || end < 0)
            fail(ErrorCode::data, "segment line must read 'start end kind': " + line);
        spans.push_back({static_cast<std::uint32_t>(start), static_cast<std::uint32_t>(end), parse_segment_kind(kind)});
    }
    return SegmentMap(std::move(spans), tokens);
}

std::string SegmentMap::to_text() const {
    std::string out;
    for (const auto& s : spans_) out += std::to_string(s.start) + " " + std::to_string(s.end) + " " + std::string(to_string(s.kind)) + "\n";
    return out;
}

SegmentKind SegmentMap::kind_at(std::uint32_t token) const {
    require(token < tokens_, ErrorCode::dimension, "token outside segment map");
    auto it = std::upper_bound(spans_.begin(), spans_.end(), token,
                               [](std::uint32_t t, const SegmentSpan& s) { return t < s.end; });
    return it->kind;
}

double SegmentPriors::of(SegmentKind kind) const {
    switch (kind) {
        case SegmentKind::system: return system;
        case SegmentKind::shared_doc: return shared_doc;
        case SegmentKind::conversation: return conversation;
        case SegmentKind::shared_state: return shared_state;
        case SegmentKind::agent_private: return agent_private;
    }
    return 0.0;
}

AnchorPool update_anchor_pool(const AnchorPool& pool, std::span<const std::vector<double>> shared_keys,
                              std::span<const double> observed_weights) {
    require(shared_keys.size() == observed_weights.size(), ErrorCode::dimension, "anchor keys and weights differ in count");
    for (double w : observed_weights)
        require(w >= 0.0 && w <= 1.0, ErrorCode::parameter, "anchor downstream weight outside [0,1]");

    AnchorPool out = pool;
    for (std::size_t i = 0; i < shared_keys.size(); ++i) out.anchors.push_back({shared_keys[i], observed_weights[i]});
    while (out.anchors.size() > out.capacity) {
        // min_element returns the first minimum, i.e. the oldest.
        auto victim = std::min_element(out.anchors.begin(), out.anchors.end(),
                                       [](const Anchor& a, const Anchor& b) { return a.downstream_weight < b.downstream_weight; });
        out.anchors.erase(victim);
    }
    return out;
}

std::vector<std::vector<double>> anchor_embeddings(const KVCache& cache) {
    const auto& d = cache.dims();
    std::vector<std::vector<double>> out(d.tokens, std::vector<double>(d.head_dim, 0.0));
    for (std::uint32_t h = 0; h < d.heads; ++h)
        for (std::uint32_t t = 0; t < d.tokens; ++t) {
            auto row = cache.key_row(0, h, t);
            for (std::uint32_t c = 0; c < d.head_dim; ++c) out[t][c] += row[c];
        }
    for (auto& row : out)
        for (auto& v : row) v /= d.heads;
    return out;
}

namespace {

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

std::vector<double> downstream_demand(std::span<const std::vector<double>> keys, const AnchorPool& pool,
                                      const SegmentMap& segments, const SegmentPriors& priors) {
    require(keys.size() == segments.tokens(), ErrorCode::dimension, "key count differs from segment map length");
    std::vector<double> anchor_norms;
    for (const auto& a : pool.anchors) {
        if (a.embedding.empty()) fail(ErrorCode::data, "zero-length anchor embedding");
        anchor_norms.push_back(norm(a.embedding));
    }

    std::vector<double> demand(keys.size());
    for (std::size_t t = 0; t < keys.size(); ++t) {
        const auto& key = keys[t];
        if (key.empty()) fail(ErrorCode::data, "zero-length key vector");
        double anchor_term = 0.0;
        if (!pool.anchors.empty()) {
            const double kn = norm(key);
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < pool.anchors.size(); ++a) {
                const auto& emb = pool.anchors[a].embedding;
                if (emb.size() != key.size()) fail(ErrorCode::dimension, "anchor embedding width differs from key width");
                double dot = 0.0;
                for (std::size_t c = 0; c < key.size(); ++c) dot += key[c] * emb[c];
                // A zero vector has no direction; treat its similarity as 0.
                double cosine = (kn > 0.0 && anchor_norms[a] > 0.0) ? dot / (kn * anchor_norms[a]) : 0.0;
                if (cosine > best) {  // strict: ties keep the lowest index
                    best = cosine;
                    anchor_term = pool.anchors[a].downstream_weight;
                }
            }
        }
        demand[t] = std::clamp(priors.of(segments.kind_at(static_cast<std::uint32_t>(t))) + anchor_term, 0.0, 1.0);
    }
    return demand;
}

std::vector<double> min_max_normalize(std::span<const double> x) {
    std::vector<double> out(x.size(), 0.5);
    if (x.empty()) return out;
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
    return out;
}

TokenFeatures compute_features(const AttentionStats& stats, const SegmentMap& segments, std::span<const double> demand) {
    stats.validate();
    const std::size_t n = stats.size();
    require(segments.tokens() == n && demand.size() == n, ErrorCode::dimension,
            "stats, segments and demand must cover the same tokens");
    const auto freq = min_max_normalize(stats.received_weight);
    const auto quality = min_max_normalize(stats.quality);
    const auto variance = min_max_normalize(stats.weight_variance);
    const auto entropy = min_max_normalize(stats.query_entropy);

    TokenFeatures f;
    f.rows.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
        require(std::isfinite(demand[t]) && demand[t] >= 0.0 && demand[t] <= 1.0, ErrorCode::data,
                "downstream demand outside [0,1]");
        double code = static_cast<double>(segments.kind_at(static_cast<std::uint32_t>(t)));
        f.rows[t] = {freq[t], quality[t], variance[t], entropy[t], demand[t], code / 4.0};
    }
    return f;
}

std::vector<double> local_importance(const AttentionStats& stats) {
    stats.validate();
    const auto freq = min_max_normalize(stats.received_weight);
    const auto quality = min_max_normalize(stats.quality);
    const auto variance = min_max_normalize(stats.weight_variance);
    const auto entropy = min_max_normalize(stats.query_entropy);
    std::vector<double> out(stats.size());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = (freq[t] + quality[t] + variance[t] + entropy[t]) / 4.0;
    return out;
}

ImportanceScores combine_scores(std::span<const double> local, std::span<const double> transfer, double alpha) {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::parameter, "alpha must lie in [0,1]");
    require(local.size() == transfer.size(), ErrorCode::dimension, "local and transfer scores differ in length");
    ImportanceScores s;
    s.alpha = alpha;
    s.local.assign(local.begin(), local.end());
    s.transfer.assign(transfer.begin(), transfer.end());
    s.combined.resize(local.size());
    for (std::size_t t = 0; t < local.size(); ++t) s.combined[t] = alpha * local[t] + (1.0 - alpha) * transfer[t];
    return s;
}

}  // namespace qkv
