#include "qkv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qkv {

bool is_legal_bits(int bits) { return bits == 2 || bits == 4 || bits == 8 || bits == 16; }

BitWidth to_bit_width(int bits) {
    if (!is_legal_bits(bits)) fail(ErrorCode::parameter, "bit width must be one of 2, 4, 8, 16 (got " + std::to_string(bits) + ")");
    return static_cast<BitWidth>(bits);
}

float reconstruct(float zero_point, float scale, std::uint32_t code) {
    // scale * code is exact in binary64 (24-bit mantissa times <= 8-bit code).
    return static_cast<float>(static_cast<double>(zero_point) + static_cast<double>(scale) * code);
}

namespace {

float scale_for(float lo, float hi, std::uint32_t top) {
    return static_cast<float>((static_cast<double>(hi) - static_cast<double>(lo)) / top);
}

// A scale is stable when re-quantizing the reconstructed group (whose min is
// lo and whose max is reconstruct(lo, s, top)) yields the same scale again.
// Stable scales make requantization at an unchanged width a no-op.
bool stable(float lo, float s, std::uint32_t top) {
    return scale_for(lo, reconstruct(lo, s, top), top) == s;
}

float choose_scale(float lo, float hi, std::uint32_t top) {
    const float s0 = scale_for(lo, hi, top);
    if (s0 == 0.0f || stable(lo, s0, top)) return s0;
    float up = s0, down = s0;
    for (int step = 0; step < 64; ++step) {
        up = std::nextafter(up, std::numeric_limits<float>::infinity());
        if (stable(lo, up, top)) return up;
        down = std::nextafter(down, 0.0f);
        if (down > 0.0f && stable(lo, down, top)) return down;
    }
    return s0;
}

}  // namespace

std::size_t packed_size(std::size_t count, int bits) { return (count * static_cast<std::size_t>(bits) + 7) / 8; }

Bytes pack_codes(std::span<const std::uint8_t> codes, int bits) {
    require(bits == 2 || bits == 4 || bits == 8, ErrorCode::parameter, "packing supports 2, 4 or 8 bits");
    const unsigned limit = 1u << bits;
    Bytes out(packed_size(codes.size(), bits), 0);
    std::size_t bit = 0;
    for (auto c : codes) {
        if (c >= limit) fail(ErrorCode::parameter, "code " + std::to_string(c) + " out of range for " + std::to_string(bits) + " bits");
        // Widths divide 8, so a code never straddles a byte boundary.
        out[bit / 8] |= static_cast<std::uint8_t>(c << (bit % 8));
        bit += static_cast<std::size_t>(bits);
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(ByteView bytes, int bits, std::size_t count) {
    require(bits == 2 || bits == 4 || bits == 8, ErrorCode::parameter, "packing supports 2, 4 or 8 bits");
    if (bytes.size() < packed_size(count, bits)) fail(ErrorCode::truncated, "packed code buffer too short");
    const unsigned mask = (1u << bits) - 1;
    std::vector<std::uint8_t> out(count);
    std::size_t bit = 0;
    for (auto& c : out) {
        c = static_cast<std::uint8_t>((bytes[bit / 8] >> (bit % 8)) & mask);
        bit += static_cast<std::size_t>(bits);
    }
    return out;
}

QuantizedGroup quantize_group(std::span<const float> x, BitWidth bits) {
    require(!x.empty(), ErrorCode::parameter, "empty quantization group");
    if (!std::all_of(x.begin(), x.end(), [](float v) { return std::isfinite(v); }))
        fail(ErrorCode::data, "non-finite value in quantization group");

    QuantizedGroup q;
    q.bits = bits;
    q.length = static_cast<std::uint32_t>(x.size());
    if (bits == BitWidth::b16) {
        ByteWriter w;
        w.f32_array(x);
        q.codes = std::move(w).take();
        return q;
    }

    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const float lo = *lo_it, hi = *hi_it;
    const std::uint32_t top = (1u << bits_of(bits)) - 1;
    q.zero_point = lo;
    q.scale = lo == hi ? 0.0f : choose_scale(lo, hi, top);

    std::vector<std::uint8_t> codes(x.size(), 0);
    if (q.scale > 0.0f) {
        const double s = q.scale;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double c = std::round((static_cast<double>(x[i]) - lo) / s);  // half away from zero
            codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, static_cast<double>(top)));
        }
    }
    q.codes = pack_codes(codes, bits_of(bits));
    return q;
}

void dequantize_group_into(const QuantizedGroup& q, std::span<float> out) {
    require(out.size() == q.length, ErrorCode::dimension, "output span does not match group length");
    if (q.bits == BitWidth::b16) {
        if (q.codes.size() != std::size_t{q.length} * 4) fail(ErrorCode::malformed, "16-bit group payload length mismatch");
        ByteReader r(q.codes);
        r.f32_array(out);
        return;
    }
    if (q.codes.size() != packed_size(q.length, bits_of(q.bits)))
        fail(ErrorCode::malformed, "packed code length does not match group length");
    auto codes = unpack_codes(q.codes, bits_of(q.bits), q.length);
    for (std::size_t i = 0; i < codes.size(); ++i) out[i] = reconstruct(q.zero_point, q.scale, codes[i]);
}

std::vector<float> dequantize_group(const QuantizedGroup& q) {
    std::vector<float> out(q.length);
    dequantize_group_into(q, out);
    return out;
}

std::size_t group_payload_bytes(BitWidth bits, std::size_t length) {
    if (bits == BitWidth::b16) return 4 * length;
    return packed_size(length, bits_of(bits)) + 8;
}

std::size_t blocks(std::size_t length, std::uint32_t group_size) { return (length + group_size - 1) / group_size; }

BitWidth key_block_bits(std::span<const BitWidth> token_bits, std::size_t first, std::size_t count) {
    auto block = token_bits.subspan(first, count);
    return *std::max_element(block.begin(), block.end(),
                             [](BitWidth a, BitWidth b) { return bits_of(a) < bits_of(b); });
}

std::size_t QuantizedKV::payload_bytes() const {
    std::size_t total = 0;
    for (const auto& g : key_groups) total += group_payload_bytes(g.bits, g.length);
    for (const auto& g : value_groups) total += group_payload_bytes(g.bits, g.length);
    return total;
}

std::size_t expected_payload_bytes(const CacheDims& dims, std::span<const BitWidth> token_bits, std::uint32_t group_size) {
    require(token_bits.size() == dims.tokens, ErrorCode::dimension, "token_bits length differs from token count");
    require(group_size >= 1, ErrorCode::parameter, "group size must be >= 1");
    const std::size_t lh = std::size_t{dims.layers} * dims.heads;
    std::size_t per_lh = 0;
    for (std::size_t first = 0; first < dims.tokens; first += group_size) {
        std::size_t count = std::min<std::size_t>(group_size, dims.tokens - first);
        per_lh += dims.head_dim * group_payload_bytes(key_block_bits(token_bits, first, count), count);
    }
    for (std::size_t t = 0; t < dims.tokens; ++t) {
        for (std::size_t first = 0; first < dims.head_dim; first += group_size) {
            std::size_t count = std::min<std::size_t>(group_size, dims.head_dim - first);
            per_lh += group_payload_bytes(token_bits[t], count);
        }
    }
    return lh * per_lh;
}

QuantizedKV quantize_cache(const KVCache& cache, std::span<const BitWidth> token_bits, std::uint32_t group_size) {
    const auto& d = cache.dims();
    require(token_bits.size() == d.tokens, ErrorCode::dimension, "bit assignment length differs from token count");
    require(group_size >= 1, ErrorCode::parameter, "group size must be >= 1");

    QuantizedKV q;
    q.dims = d;
    q.group_size = group_size;
    q.token_bits.assign(token_bits.begin(), token_bits.end());
    q.key_groups.reserve(std::size_t{d.layers} * d.heads * d.head_dim * blocks(d.tokens, group_size));
    q.value_groups.reserve(d.rows() * blocks(d.head_dim, group_size));

    std::vector<float> column;
    for (std::uint32_t l = 0; l < d.layers; ++l) {
        for (std::uint32_t h = 0; h < d.heads; ++h) {
            for (std::uint32_t c = 0; c < d.head_dim; ++c) {
                for (std::uint32_t first = 0; first < d.tokens; first += group_size) {
                    const std::uint32_t count = std::min(group_size, d.tokens - first);
                    column.resize(count);
                    for (std::uint32_t i = 0; i < count; ++i) column[i] = cache.keys()[cache.index(l, h, first + i, c)];
                    q.key_groups.push_back(quantize_group(column, key_block_bits(token_bits, first, count)));
                }
            }
            for (std::uint32_t t = 0; t < d.tokens; ++t) {
                auto row = cache.value_row(l, h, t);
                for (std::uint32_t first = 0; first < d.head_dim; first += group_size) {
                    const std::uint32_t count = std::min(group_size, d.head_dim - first);
                    q.value_groups.push_back(quantize_group(row.subspan(first, count), token_bits[t]));
                }
            }
        }
    }
    return q;
}

void validate_layout(const QuantizedKV& q) {
    const auto& d = q.dims;
    if (!d.valid()) fail(ErrorCode::malformed, "quantized cache has a zero dimension");
    if (q.group_size == 0) fail(ErrorCode::malformed, "group size is zero");
    if (q.token_bits.size() != d.tokens) fail(ErrorCode::malformed, "token_bits length differs from token count");
    for (auto b : q.token_bits)
        if (!is_legal_bits(bits_of(b))) fail(ErrorCode::malformed, "illegal token bit width");
    const std::size_t key_blocks = blocks(d.tokens, q.group_size);
    const std::size_t value_blocks = blocks(d.head_dim, q.group_size);
    if (q.key_groups.size() != std::size_t{d.layers} * d.heads * d.head_dim * key_blocks ||
        q.value_groups.size() != d.rows() * value_blocks)
        fail(ErrorCode::malformed, "group count does not cover the cache exactly");

    auto check = [](const QuantizedGroup& g, BitWidth bits, std::size_t length) {
        if (g.bits != bits || g.length != length) fail(ErrorCode::malformed, "group width or length disagrees with layout");
        std::size_t code_bytes = bits == BitWidth::b16 ? 4 * length : packed_size(length, bits_of(bits));
        if (g.codes.size() != code_bytes) fail(ErrorCode::malformed, "group code buffer has wrong size");
    };
    std::size_t gi = 0;
    for (std::size_t lhc = 0; lhc < std::size_t{d.layers} * d.heads * d.head_dim; ++lhc)
        for (std::size_t first = 0; first < d.tokens; first += q.group_size, ++gi) {
            std::size_t count = std::min<std::size_t>(q.group_size, d.tokens - first);
            check(q.key_groups[gi], key_block_bits(q.token_bits, first, count), count);
        }
    gi = 0;
    for (std::size_t row = 0; row < d.rows(); ++row) {
        BitWidth bits = q.token_bits[row % d.tokens];
        for (std::size_t first = 0; first < d.head_dim; first += q.group_size, ++gi)
            check(q.value_groups[gi], bits, std::min<std::size_t>(q.group_size, d.head_dim - first));
    }
}

KVCache dequantize_cache(const QuantizedKV& q) {
    validate_layout(q);
    const auto& d = q.dims;
    KVCache cache(d);
    std::vector<float> column;
    std::size_t gi = 0;
    for (std::uint32_t l = 0; l < d.layers; ++l)
        for (std::uint32_t h = 0; h < d.heads; ++h)
            for (std::uint32_t c = 0; c < d.head_dim; ++c)
                for (std::uint32_t first = 0; first < d.tokens; first += q.group_size) {
                    const auto& g = q.key_groups[gi++];
                    column.resize(g.length);
                    dequantize_group_into(g, column);
                    for (std::uint32_t i = 0; i < g.length; ++i) cache.keys()[cache.index(l, h, first + i, c)] = column[i];
                }
    gi = 0;
    for (std::uint32_t l = 0; l < d.layers; ++l)
        for (std::uint32_t h = 0; h < d.heads; ++h)
            for (std::uint32_t t = 0; t < d.tokens; ++t) {
                auto row = cache.value_row(l, h, t);
                for (std::uint32_t first = 0; first < d.head_dim; first += q.group_size) {
                    const auto& g = q.value_groups[gi++];
                    dequantize_group_into(g, row.subspan(first, g.length));
                }
            }
    return cache;
}

double analytic_error(BitWidth bits, double value_range) {
    require(value_range >= 0.0 && std::isfinite(value_range), ErrorCode::parameter, "value range must be finite and >= 0");
    if (bits == BitWidth::b16) return 0.0;
    const double step = value_range / static_cast<double>((1u << bits_of(bits)) - 1);
    return step * step / 12.0;
}

}  // namespace qkv
