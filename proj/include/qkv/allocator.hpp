#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "qkv/quantizer.hpp"
#include "qkv/tensorio.hpp"
#include "qkv/toy_model.hpp"

namespace qkv {

struct BitAssignment {
    std::vector<BitWidth> bits;
    double average_bits = 0.0;
    double objective_value = 0.0;  // sum_t eps(t, b(t)) * S(t)

    std::uint64_t total_bits() const;
};

enum class ErrorMode { analytic, measured };

// eps[t][i] is the quantization error of token t at width all_bit_widths[i].
struct ErrorTable {
    std::vector<std::array<double, 4>> eps;
    ErrorMode mode = ErrorMode::analytic;

    std::size_t size() const { return eps.size(); }
    double at(std::size_t token, BitWidth b) const { return eps[token][static_cast<std::size_t>(width_index(b))]; }
    // eps >= 0, zero at 16 bits, non-increasing in width.
    void validate() const;
};

// Analytic mode: step^2/12 from the range of each token's value elements
// (all layers and heads). Measured mode: mean squared error of actually
// quantizing each token's value rows at each width with the given group
// size, made non-increasing along widths by a running minimum.
ErrorTable build_error_table(const KVCache& cache, ErrorMode mode, std::uint32_t group_size = default_group_size);

// Right fold sum_t eps(t, b_t) * S(t), evaluated from the last token to the
// first. Both solvers and the enumeration oracle use this exact order.
double weighted_objective(std::span<const double> scores, const ErrorTable& table, std::span<const BitWidth> bits);

BitAssignment make_assignment(std::vector<BitWidth> bits, std::span<const double> scores, const ErrorTable& table);
BitAssignment uniform_assignment(std::size_t tokens, BitWidth width, std::span<const double> scores, const ErrorTable& table);

inline constexpr std::size_t exact_token_cap = 64;

// Dynamic program over (token, remaining budget in 2-bit units). Globally
// minimizes the objective subject to sum b(t) <= budget_bits; among optimal
// assignments returns the lexicographically widest (earlier tokens first).
BitAssignment allocate_exact(std::span<const double> scores, const ErrorTable& table, double budget_bits,
                             std::size_t token_cap = exact_token_cap);

// Starts at 2 bits everywhere and repeatedly applies the single-step upgrade
// (t, next width) with the largest S(t) * delta_eps / delta_bits that fits the
// remaining budget; ties go to the lowest token index.
// `upgrades`, when given, receives the number of upgrade steps applied.
BitAssignment allocate_greedy(std::span<const double> scores, const ErrorTable& table, double budget_bits,
                              std::size_t* upgrades = nullptr);

// Evaluator used for calibration labels: the receiving model plus the query
// set whose outputs define "accuracy impact".
struct Evaluator {
    const ToyModel* model = nullptr;
    Matrix queries;
};

struct LabelConfig {
    double threshold = 1e-2;  // relative output error
    std::uint32_t group_size = default_group_size;
};

// Quantizes one token at a time (its value rows at each width, all other
// tokens untouched) and labels it with the smallest width whose relative
// toy-output error is below the threshold.
std::vector<BitWidth> label_calibration(const KVCache& cache, const Evaluator& evaluator, const LabelConfig& cfg = {});

}  // namespace qkv
