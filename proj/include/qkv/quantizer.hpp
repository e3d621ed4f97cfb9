#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "qkv/bytes.hpp"
#include "qkv/tensorio.hpp"

namespace qkv {

// Legal per-token precisions. 16 means "kept at full precision" (stored as
// raw 32-bit floats, see the format notes).
enum class BitWidth : std::uint8_t { b2 = 2, b4 = 4, b8 = 8, b16 = 16 };

inline constexpr std::array<BitWidth, 4> all_bit_widths{BitWidth::b2, BitWidth::b4, BitWidth::b8, BitWidth::b16};

constexpr int bits_of(BitWidth b) { return static_cast<int>(b); }

// Position of the width in {2,4,8,16}; the controller's class index.
constexpr int width_index(BitWidth b) {
    switch (b) {
        case BitWidth::b2: return 0;
        case BitWidth::b4: return 1;
        case BitWidth::b8: return 2;
        case BitWidth::b16: return 3;
    }
    return 0;
}

constexpr BitWidth width_from_index(int i) { return all_bit_widths.at(static_cast<std::size_t>(i)); }

bool is_legal_bits(int bits);
BitWidth to_bit_width(int bits);  // throws parameter error

inline constexpr std::uint32_t default_group_size = 32;

struct QuantizedGroup {
    BitWidth bits = BitWidth::b16;
    float scale = 0.0f;
    float zero_point = 0.0f;
    std::uint32_t length = 0;
    // Packed codes (LSB-first) for bits < 16; raw little-endian float32 for 16.
    Bytes codes;

    friend bool operator==(const QuantizedGroup&, const QuantizedGroup&) = default;
};

QuantizedGroup quantize_group(std::span<const float> x, BitWidth bits);
std::vector<float> dequantize_group(const QuantizedGroup& q);
void dequantize_group_into(const QuantizedGroup& q, std::span<float> out);

// Reconstruction of a single code; shared by dequantization and the
// scale search so both use the same rounding.
float reconstruct(float zero_point, float scale, std::uint32_t code);

std::size_t packed_size(std::size_t count, int bits);
Bytes pack_codes(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_codes(ByteView bytes, int bits, std::size_t count);

// Bytes one group occupies in a card payload: packed codes plus a float32
// scale and zero point, or raw float32 values at 16 bits.
std::size_t group_payload_bytes(BitWidth bits, std::size_t length);

struct QuantizedKV {
    CacheDims dims;
    std::uint32_t group_size = default_group_size;
    std::vector<BitWidth> token_bits;
    // Keys: per channel, consecutive blocks of group_size tokens, ordered
    // [layer][head][channel][block]. Values: per token, consecutive blocks of
    // group_size dims, ordered [layer][head][token][block].
    std::vector<QuantizedGroup> key_groups;
    std::vector<QuantizedGroup> value_groups;

    std::size_t payload_bytes() const;

    friend bool operator==(const QuantizedKV&, const QuantizedKV&) = default;
};

std::size_t blocks(std::size_t length, std::uint32_t group_size);

// Width used by the key group covering tokens [first, first + count): the
// widest requested width among them.
BitWidth key_block_bits(std::span<const BitWidth> token_bits, std::size_t first, std::size_t count);

// Exact payload size of quantize_cache(cache-with-dims, token_bits, group_size).
std::size_t expected_payload_bytes(const CacheDims& dims, std::span<const BitWidth> token_bits,
                                   std::uint32_t group_size = default_group_size);

QuantizedKV quantize_cache(const KVCache& cache, std::span<const BitWidth> token_bits,
                           std::uint32_t group_size = default_group_size);
KVCache dequantize_cache(const QuantizedKV& q);

// Throws malformed if group counts, lengths, widths or code sizes disagree
// with dims/token_bits.
void validate_layout(const QuantizedKV& q);

// Expected squared error of uniform rounding: step^2 / 12 with
// step = range / (2^bits - 1); zero at 16 bits.
double analytic_error(BitWidth bits, double value_range);

}  // namespace qkv
