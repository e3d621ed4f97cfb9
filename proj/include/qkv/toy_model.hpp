#pragma once

#include <string>

#include <cstdint>
#include <span>
#include <vector>

#include "qkv/tensorio.hpp"

namespace qkv {

// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

// Seeded standard-normal matrix (SplitMix64 / Irwin-Hall), scaled by `scale`.
Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0);

struct ToyModelConfig {
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t head_dim = 16;
    std::uint64_t seed = 0x5eedULL;
    double temperature = 1.0;
};

// Desk-scale attention model standing in for the receiving agent. Each
// (layer, head) owns query/key/value/output projections of size
// head_dim x head_dim. The model width equals head_dim.
class ToyModel {
public:
    explicit ToyModel(ToyModelConfig cfg);

    const ToyModelConfig& config() const { return cfg_; }
    std::string model_id() const;

    // One decode step against a cached context: for every (layer, head)
    // softmax((q Wq) K^T / (sqrt(d) * temperature)) V projected by Wo,
    // averaged over all (layer, head) pairs. Output is [queries x head_dim].
    Matrix forward(const KVCache& cache, const Matrix& queries) const;

    // Full causal forward over a context of embeddings [tokens x head_dim]
    // that builds the KV cache from scratch (the re-prefill path).
    KVCache prefill(const Matrix& embeddings) const;

    // Attention received by each cached token from `queries`, averaged over
    // (layer, head, query), plus its variance and each token's causal
    // self-attention entropy. The quality field is left at 0.5.
    AttentionStats observe(const KVCache& cache, const Matrix& queries) const;

    // Multiply-accumulate counts of the two paths, used by the modeled clock.
    double forward_ops(std::size_t tokens, std::size_t queries) const;
    double prefill_ops(std::size_t tokens) const;

private:
    void check_cache(const KVCache& cache) const;
    std::size_t slot(std::uint32_t layer, std::uint32_t head) const { return std::size_t{layer} * cfg_.heads + head; }

    ToyModelConfig cfg_;
    std::vector<Matrix> wq_, wk_, wv_, wo_;
};

// ||a - b||_2 / ||b||_2 over all entries; 0 when both are zero.
double relative_l2_error(const Matrix& approx, const Matrix& reference);

}  // namespace qkv
