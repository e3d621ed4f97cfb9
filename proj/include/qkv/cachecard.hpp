#pragma once

#include <cstdint>
#include <string>

#include "qkv/bytes.hpp"
#include "qkv/quantizer.hpp"

namespace qkv {

inline constexpr char card_magic[4] = {'Q', 'K', 'V', 'C'};
inline constexpr std::uint16_t card_version = 1;

struct CardHeader {
    std::uint16_t version = card_version;
    std::string model_id;
    std::string sender_id;
    // Carried verbatim for future cross-prefix alignment; never interpreted.
    std::int32_t position_offset_placeholder = 0;

    friend bool operator==(const CardHeader&, const CardHeader&) = default;
};

struct CardStats {
    double average_bits = 0.0;
    std::uint64_t payload_bytes = 0;
    std::uint64_t fp16_equivalent_bytes = 0;
    double compression_ratio = 0.0;  // payload_bytes / fp16_equivalent_bytes

    friend bool operator==(const CardStats&, const CardStats&) = default;
};

// Self-contained quantized handoff artifact. Sequence length, dims, group
// size and the token bit-width vector live in `kv`.
struct CacheCard {
    CardHeader header;
    QuantizedKV kv;
    CardStats stats;

    friend bool operator==(const CacheCard&, const CacheCard&) = default;
};

// 2 tensors * L * H * n * d * 2 bytes.
std::uint64_t fp16_equivalent_bytes(const CacheDims& dims);

CardStats compute_stats(const QuantizedKV& kv);

CacheCard build_card(QuantizedKV kv, std::string model_id, std::string sender_id, std::int32_t position_offset = 0);

Bytes encode_card(const CacheCard& card);
// Throws CardError with bad_magic, unsupported_version, truncated,
// crc_mismatch or malformed.
CacheCard decode_card(ByteView bytes);

// Returns the stored stats after checking they equal a recomputation.
CardStats card_stats(const CacheCard& card);

// The CRC-32 trailer of an encoded card (the checksum over everything before
// it). Hashing a whole card instead would always give the CRC-32 residue.
std::uint32_t card_checksum(ByteView encoded);

// Total encoded size implied by the header fields, without encoding.
std::size_t encoded_card_size(const CacheCard& card);

}  // namespace qkv
