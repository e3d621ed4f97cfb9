#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qkv/bytes.hpp"

namespace qkv {

struct CacheDims {
    std::uint32_t layers = 0;
    std::uint32_t heads = 0;
    std::uint32_t tokens = 0;
    std::uint32_t head_dim = 0;

    std::size_t elements() const {
        return std::size_t{layers} * heads * tokens * head_dim;
    }
    // Rows of length head_dim, one per (layer, head, token).
    std::size_t rows() const { return std::size_t{layers} * heads * tokens; }

    bool valid() const { return layers >= 1 && heads >= 1 && tokens >= 1 && head_dim >= 1; }

    friend bool operator==(const CacheDims&, const CacheDims&) = default;
};

// Full-precision key/value tensors laid out row-major as
// [layer][head][token][dim].
class KVCache {
public:
    KVCache() = default;
    explicit KVCache(CacheDims dims);
    KVCache(CacheDims dims, std::vector<float> keys, std::vector<float> values);

    const CacheDims& dims() const { return dims_; }
    std::uint32_t layers() const { return dims_.layers; }
    std::uint32_t heads() const { return dims_.heads; }
    std::uint32_t tokens() const { return dims_.tokens; }
    std::uint32_t head_dim() const { return dims_.head_dim; }

    std::size_t index(std::uint32_t layer, std::uint32_t head, std::uint32_t token, std::uint32_t dim = 0) const {
        return ((std::size_t{layer} * dims_.heads + head) * dims_.tokens + token) * dims_.head_dim + dim;
    }

    std::span<const float> keys() const { return keys_; }
    std::span<const float> values() const { return values_; }
    std::span<float> keys() { return keys_; }
    std::span<float> values() { return values_; }

    std::span<const float> key_row(std::uint32_t l, std::uint32_t h, std::uint32_t t) const {
        return {keys_.data() + index(l, h, t), dims_.head_dim};
    }
    std::span<const float> value_row(std::uint32_t l, std::uint32_t h, std::uint32_t t) const {
        return {values_.data() + index(l, h, t), dims_.head_dim};
    }
    std::span<float> key_row(std::uint32_t l, std::uint32_t h, std::uint32_t t) {
        return {keys_.data() + index(l, h, t), dims_.head_dim};
    }
    std::span<float> value_row(std::uint32_t l, std::uint32_t h, std::uint32_t t) {
        return {values_.data() + index(l, h, t), dims_.head_dim};
    }

    // Throws data error on NaN/Inf.
    void check_finite() const;

    // Bitwise equality of shape and every element.
    bool bit_identical(const KVCache& other) const;

private:
    CacheDims dims_;
    std::vector<float> keys_;
    std::vector<float> values_;
};

struct AttentionStats {
    std::vector<double> received_weight;  // mean attention mass received, in [0,1]
    std::vector<double> weight_variance;  // variance across heads, >= 0
    std::vector<double> query_entropy;    // nats, >= 0
    std::vector<double> quality;          // in [0,1]
    // Tokens given concentrated attention mass by the generator (ascending).
    std::vector<std::uint32_t> heavy_hitters;

    std::size_t size() const { return received_weight.size(); }
    void validate() const;

    friend bool operator==(const AttentionStats&, const AttentionStats&) = default;
};

struct SyntheticConfig {
    std::uint64_t seed = 0;
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t tokens = 32;
    std::uint32_t head_dim = 16;
    double value_scale = 1.0;
    double heavy_hitter_fraction = 0.125;
    std::size_t max_elements = std::size_t{1} << 28;

    CacheDims dims() const { return {layers, heads, tokens, head_dim}; }
    void validate() const;
};

KVCache generate_synthetic_cache(const SyntheticConfig& cfg);
AttentionStats generate_attention_stats(const SyntheticConfig& cfg, const KVCache& cache);

// QKVT container.
inline constexpr char container_magic[4] = {'Q', 'K', 'V', 'T'};
inline constexpr std::uint16_t container_version = 1;
inline constexpr std::size_t container_header_bytes = 24;

Bytes encode_container(const KVCache& cache);
KVCache decode_container(ByteView bytes);
std::size_t store_container(const KVCache& cache, const std::string& path);
KVCache load_container(const std::string& path);

}  // namespace qkv
