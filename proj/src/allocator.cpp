#include "qkv/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace qkv {

std::uint64_t BitAssignment::total_bits() const {
    std::uint64_t s = 0;
    for (auto b : bits) s += static_cast<std::uint64_t>(bits_of(b));
    return s;
}

void ErrorTable::validate() const {
    for (const auto& row : eps) {
        for (double e : row) require(std::isfinite(e) && e >= 0.0, ErrorCode::data, "error table entries must be finite and >= 0");
        require(row[3] == 0.0, ErrorCode::data, "16-bit error must be zero");
        require(row[0] >= row[1] && row[1] >= row[2] && row[2] >= row[3], ErrorCode::data,
                "error table must be non-increasing in bit width");
    }
}

ErrorTable build_error_table(const KVCache& cache, ErrorMode mode, std::uint32_t group_size) {
    cache.check_finite();
    const auto& d = cache.dims();
    ErrorTable table;
    table.mode = mode;
    table.eps.assign(d.tokens, {0.0, 0.0, 0.0, 0.0});

    if (mode == ErrorMode::analytic) {
        for (std::uint32_t t = 0; t < d.tokens; ++t) {
            float lo = std::numeric_limits<float>::infinity(), hi = -lo;
            for (std::uint32_t l = 0; l < d.layers; ++l)
                for (std::uint32_t h = 0; h < d.heads; ++h)
                    for (float v : cache.value_row(l, h, t)) {
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
            const double range = static_cast<double>(hi) - lo;
            for (int i = 0; i < 4; ++i) table.eps[t][static_cast<std::size_t>(i)] = analytic_error(width_from_index(i), range);
        }
        return table;
    }

    require(group_size >= 1, ErrorCode::parameter, "group size must be >= 1");
    const double per_token = static_cast<double>(d.layers) * d.heads * d.head_dim;
    std::vector<float> recon;
    for (std::uint32_t t = 0; t < d.tokens; ++t) {
        for (int i = 0; i < 3; ++i) {
            const BitWidth b = width_from_index(i);
            double sq = 0.0;
            for (std::uint32_t l = 0; l < d.layers; ++l)
                for (std::uint32_t h = 0; h < d.heads; ++h) {
                    auto row = cache.value_row(l, h, t);
                    for (std::uint32_t first = 0; first < d.head_dim; first += group_size) {
                        auto part = row.subspan(first, std::min(group_size, d.head_dim - first));
                        recon = dequantize_group(quantize_group(part, b));
                        for (std::size_t k = 0; k < part.size(); ++k) {
                            const double e = static_cast<double>(part[k]) - recon[k];
                            sq += e * e;
                        }
                    }
                }
            table.eps[t][static_cast<std::size_t>(i)] = sq / per_token;
        }
        // Monotone envelope: a wider code never reports more error than a
        // narrower one.
        for (std::size_t i = 1; i < 3; ++i) table.eps[t][i] = std::min(table.eps[t][i], table.eps[t][i - 1]);
        table.eps[t][3] = 0.0;
    }
    return table;
}

double weighted_objective(std::span<const double> scores, const ErrorTable& table, std::span<const BitWidth> bits) {
    require(scores.size() == table.size() && bits.size() == table.size(), ErrorCode::dimension,
            "scores, error table and bits must have equal length");
    double acc = 0.0;
    for (std::size_t t = bits.size(); t-- > 0;) acc = scores[t] * table.at(t, bits[t]) + acc;
    return acc;
}

BitAssignment make_assignment(std::vector<BitWidth> bits, std::span<const double> scores, const ErrorTable& table) {
    BitAssignment a;
    a.objective_value = weighted_objective(scores, table, bits);
    a.bits = std::move(bits);
    a.average_bits = a.bits.empty() ? 0.0 : static_cast<double>(a.total_bits()) / static_cast<double>(a.bits.size());
    return a;
}

BitAssignment uniform_assignment(std::size_t tokens, BitWidth width, std::span<const double> scores, const ErrorTable& table) {
    return make_assignment(std::vector<BitWidth>(tokens, width), scores, table);
}

namespace {

void check_problem(std::span<const double> scores, const ErrorTable& table, double budget_bits) {
    const std::size_t n = scores.size();
    require(n >= 1, ErrorCode::parameter, "allocation needs at least one token");
    require(table.size() == n, ErrorCode::dimension, "error table length differs from score length");
    for (double s : scores) require(std::isfinite(s) && s >= 0.0, ErrorCode::parameter, "scores must be finite and >= 0");
    table.validate();
    require(std::isfinite(budget_bits) || budget_bits == std::numeric_limits<double>::infinity(), ErrorCode::parameter,
            "budget must not be NaN");
    if (budget_bits < 2.0 * static_cast<double>(n))
        fail(ErrorCode::parameter, "budget below 2 bits per token is infeasible");
}

constexpr std::array<std::size_t, 4> width_units{1, 2, 4, 8};  // bits / 2

}  // namespace

BitAssignment allocate_exact(std::span<const double> scores, const ErrorTable& table, double budget_bits, std::size_t token_cap) {
    check_problem(scores, table, budget_bits);
    const std::size_t n = scores.size();
    if (n > token_cap) fail(ErrorCode::parameter, "exact allocation limited to " + std::to_string(token_cap) + " tokens");

    // Budget in 2-bit units; all widths are even so this loses nothing.
    const std::size_t max_units = 8 * n;
    const std::size_t units = budget_bits >= 16.0 * static_cast<double>(n)
                                  ? max_units
                                  : static_cast<std::size_t>(std::floor(budget_bits / 2.0));

    constexpr double inf = std::numeric_limits<double>::infinity();
    // best[t][r]: minimal right-fold objective of tokens t..n-1 within r units.
    std::vector<std::vector<double>> best(n + 1, std::vector<double>(units + 1, inf));
    std::fill(best[n].begin(), best[n].end(), 0.0);
    for (std::size_t t = n; t-- > 0;)
        for (std::size_t r = 0; r <= units; ++r)
            for (std::size_t i = 0; i < 4; ++i) {
                if (width_units[i] > r) break;
                const double tail = best[t + 1][r - width_units[i]];
                if (tail == inf) continue;
                best[t][r] = std::min(best[t][r], scores[t] * table.eps[t][i] + tail);
            }

    std::vector<BitWidth> bits(n);
    std::size_t r = units;
    for (std::size_t t = 0; t < n; ++t) {
        bool chosen = false;
        for (std::size_t i = 4; i-- > 0;) {  // widest first
            if (width_units[i] > r) continue;
            const double tail = best[t + 1][r - width_units[i]];
            if (tail != inf && scores[t] * table.eps[t][i] + tail == best[t][r]) {
                bits[t] = width_from_index(static_cast<int>(i));
                r -= width_units[i];
                chosen = true;
                break;
            }
        }
        if (!chosen) fail(ErrorCode::data, "exact allocation reconstruction failed");
    }
    return make_assignment(std::move(bits), scores, table);
}

BitAssignment allocate_greedy(std::span<const double> scores, const ErrorTable& table, double budget_bits, std::size_t* upgrades) {
    check_problem(scores, table, budget_bits);
    const std::size_t n = scores.size();
    std::vector<int> level(n, 0);
    double used = 2.0 * static_cast<double>(n);
    std::size_t steps = 0;
    while (true) {
        double best_ratio = -1.0;
        std::size_t best_t = n;
        for (std::size_t t = 0; t < n; ++t) {
            if (level[t] == 3) continue;
            const int from = level[t], to = from + 1;
            const double delta_bits = bits_of(width_from_index(to)) - bits_of(width_from_index(from));
            if (used + delta_bits > budget_bits) continue;
            const double ratio = scores[t] * (table.eps[t][static_cast<std::size_t>(from)] - table.eps[t][static_cast<std::size_t>(to)]) / delta_bits;
            if (ratio > best_ratio) {
                best_ratio = ratio;
                best_t = t;
            }
        }
        if (best_t == n) break;
        used += bits_of(width_from_index(level[best_t] + 1)) - bits_of(width_from_index(level[best_t]));
        ++level[best_t];
        ++steps;
    }
    if (upgrades) *upgrades = steps;
    std::vector<BitWidth> bits(n);
    for (std::size_t t = 0; t < n; ++t) bits[t] = width_from_index(level[t]);
    return make_assignment(std::move(bits), scores, table);
}

std::vector<BitWidth> label_calibration(const KVCache& cache, const Evaluator& evaluator, const LabelConfig& cfg) {
    require(evaluator.model != nullptr, ErrorCode::parameter, "calibration needs an evaluator model");
    require(cfg.group_size >= 1, ErrorCode::parameter, "group size must be >= 1");
    require(!(cfg.threshold < 0.0), ErrorCode::parameter, "label threshold must be >= 0");
    const auto& d = cache.dims();
    const Matrix reference = evaluator.model->forward(cache, evaluator.queries);

    std::vector<BitWidth> labels(d.tokens, BitWidth::b16);
    KVCache probe = cache;
    for (std::uint32_t t = 0; t < d.tokens; ++t) {
        for (int i = 0; i < 3; ++i) {
            const BitWidth b = width_from_index(i);
            for (std::uint32_t l = 0; l < d.layers; ++l)
                for (std::uint32_t h = 0; h < d.heads; ++h) {
                    auto src = cache.value_row(l, h, t);
                    auto dst = probe.value_row(l, h, t);
                    for (std::uint32_t first = 0; first < d.head_dim; first += cfg.group_size) {
                        const std::uint32_t count = std::min(cfg.group_size, d.head_dim - first);
                        dequantize_group_into(quantize_group(src.subspan(first, count), b), dst.subspan(first, count));
                    }
                }
            const double err = relative_l2_error(evaluator.model->forward(probe, evaluator.queries), reference);
            // restore before the next probe
            for (std::uint32_t l = 0; l < d.layers; ++l)
                for (std::uint32_t h = 0; h < d.heads; ++h) {
                    auto src = cache.value_row(l, h, t);
                    std::copy(src.begin(), src.end(), probe.value_row(l, h, t).begin());
                }
            if (err < cfg.threshold) {
                labels[t] = b;
                break;
            }
        }
    }
    return labels;
}

}  // namespace qkv
