#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qkv/tensorio.hpp"

namespace qkv {

// Context segment kinds, in code order 0..4.
enum class SegmentKind : std::uint8_t { system = 0, shared_doc = 1, conversation = 2, shared_state = 3, agent_private = 4 };

std::string_view to_string(SegmentKind kind);
SegmentKind parse_segment_kind(std::string_view name);

struct SegmentSpan {
    std::uint32_t start = 0;  // inclusive
    std::uint32_t end = 0;    // exclusive
    SegmentKind kind = SegmentKind::agent_private;

    friend bool operator==(const SegmentSpan&, const SegmentSpan&) = default;
};

class SegmentMap {
public:
    SegmentMap() = default;
    // Spans must be sorted, non-overlapping and cover [0, tokens).
    SegmentMap(std::vector<SegmentSpan> spans, std::uint32_t tokens);

    static SegmentMap uniform(std::uint32_t tokens, SegmentKind kind);
    // A fixed mixed layout used by the simulator when no sidecar is given:
    // system, shared_doc, conversation, shared_state, agent_private in
    // proportions 1/8, 3/8, 1/4, 1/8, 1/8.
    static SegmentMap default_layout(std::uint32_t tokens);

    // Sidecar text: one "start end kind" line per span; '#' starts a comment.
    static SegmentMap parse(std::string_view text, std::uint32_t tokens);
    std::string to_text() const;

    SegmentKind kind_at(std::uint32_t token) const;
    std::uint32_t tokens() const { return tokens_; }
    const std::vector<SegmentSpan>& spans() const { return spans_; }

private:
    std::vector<SegmentSpan> spans_;
    std::uint32_t tokens_ = 0;
};

// Baseline downstream demand per segment kind.
struct SegmentPriors {
    double system = 0.75;
    double shared_doc = 0.5;
    double conversation = 0.25;
    double shared_state = 0.75;
    double agent_private = 0.0;

    double of(SegmentKind kind) const;
};

struct Anchor {
    std::vector<double> embedding;
    double downstream_weight = 0.0;

    friend bool operator==(const Anchor&, const Anchor&) = default;
};

struct AnchorPool {
    std::vector<Anchor> anchors;  // insertion order
    std::size_t capacity = 16;

    friend bool operator==(const AnchorPool&, const AnchorPool&) = default;
};

// Appends the new anchors, then evicts lowest-weight anchors (oldest first
// among equal weights) until the pool fits its capacity. Duplicates are kept.
AnchorPool update_anchor_pool(const AnchorPool& pool, std::span<const std::vector<double>> shared_keys,
                              std::span<const double> observed_weights);

// Per-token embedding used for anchor matching: layer-0 keys averaged over
// heads, shape [tokens][head_dim].
std::vector<std::vector<double>> anchor_embeddings(const KVCache& cache);

// D(t) = clamp(prior(kind(t)) + weight of the most cosine-similar anchor, 0, 1).
std::vector<double> downstream_demand(std::span<const std::vector<double>> keys, const AnchorPool& pool,
                                      const SegmentMap& segments, const SegmentPriors& priors = {});

// Min-max normalization onto [0,1]; a constant vector maps to 0.5.
std::vector<double> min_max_normalize(std::span<const double> x);

inline constexpr std::size_t feature_count = 6;
using FeatureRow = std::array<double, feature_count>;

// Columns: frequency, quality, attention_variance, entropy, downstream_demand,
// segment_type (code / 4). The first four are min-max normalized over tokens.
struct TokenFeatures {
    std::vector<FeatureRow> rows;

    std::size_t size() const { return rows.size(); }
};

TokenFeatures compute_features(const AttentionStats& stats, const SegmentMap& segments, std::span<const double> demand);

// I(t): mean of the four min-max normalized local statistics.
std::vector<double> local_importance(const AttentionStats& stats);

struct ImportanceScores {
    std::vector<double> local;     // I(t)
    std::vector<double> transfer;  // T(t)
    std::vector<double> combined;  // S(t) = alpha * I + (1 - alpha) * T
    double alpha = 0.5;
};

ImportanceScores combine_scores(std::span<const double> local, std::span<const double> transfer, double alpha);

}  // namespace qkv
