#include "qkv/cachecard.hpp"

#include <cstring>
#include <limits>

namespace qkv {

namespace {

constexpr std::size_t stats_block_bytes = 32;

[[noreturn]] void card_fail(ErrorCode code, const std::string& what) { throw CardError(code, what); }

std::size_t header_bytes(const CardHeader& h) {
    // magic, version, reserved, two length-prefixed ids, seven u32/i32 fields
    return 4 + 2 + 2 + 1 + h.model_id.size() + 1 + h.sender_id.size() + 7 * 4;
}

}  // namespace

std::uint64_t fp16_equivalent_bytes(const CacheDims& dims) {
    return std::uint64_t{2} * dims.layers * dims.heads * dims.tokens * dims.head_dim * 2;
}

CardStats compute_stats(const QuantizedKV& kv) {
    CardStats s;
    std::uint64_t total = 0;
    for (auto b : kv.token_bits) total += static_cast<std::uint64_t>(bits_of(b));
    s.average_bits = static_cast<double>(total) / static_cast<double>(kv.token_bits.size());
    s.payload_bytes = kv.payload_bytes();
    s.fp16_equivalent_bytes = fp16_equivalent_bytes(kv.dims);
    s.compression_ratio = static_cast<double>(s.payload_bytes) / static_cast<double>(s.fp16_equivalent_bytes);
    return s;
}

CacheCard build_card(QuantizedKV kv, std::string model_id, std::string sender_id, std::int32_t position_offset) {
    require(model_id.size() <= 255 && sender_id.size() <= 255, ErrorCode::parameter, "card ids are limited to 255 bytes");
    require(kv.dims.tokens >= 1, ErrorCode::parameter, "a card needs at least one token");
    validate_layout(kv);
    CacheCard card;
    card.header.model_id = std::move(model_id);
    card.header.sender_id = std::move(sender_id);
    card.header.position_offset_placeholder = position_offset;
    card.stats = compute_stats(kv);
    card.kv = std::move(kv);
    return card;
}

std::size_t encoded_card_size(const CacheCard& card) {
    return header_bytes(card.header) + card.kv.token_bits.size() + stats_block_bytes + card.kv.payload_bytes() + 4;
}

namespace {

void write_group(ByteWriter& w, const QuantizedGroup& g) {
    if (g.bits != BitWidth::b16) {
        w.f32(g.scale);
        w.f32(g.zero_point);
    }
    w.raw(g.codes);
}

QuantizedGroup read_group(ByteReader& r, BitWidth bits, std::uint32_t length) {
    QuantizedGroup g;
    g.bits = bits;
    g.length = length;
    if (bits != BitWidth::b16) {
        g.scale = r.f32();
        g.zero_point = r.f32();
        auto codes = r.raw(packed_size(length, bits_of(bits)));
        g.codes.assign(codes.begin(), codes.end());
    } else {
        auto raw = r.raw(std::size_t{length} * 4);
        g.codes.assign(raw.begin(), raw.end());
    }
    return g;
}

}  // namespace

Bytes encode_card(const CacheCard& card) {
    const auto& h = card.header;
    const auto& kv = card.kv;
    validate_layout(kv);
    ByteWriter w;
    w.raw(std::string_view(card_magic, 4));
    w.u16(h.version);
    w.u16(0);
    w.short_string(h.model_id);
    w.short_string(h.sender_id);
    w.u32(kv.dims.tokens);
    w.u32(kv.dims.layers);
    w.u32(kv.dims.heads);
    w.u32(kv.dims.head_dim);
    w.u32(kv.group_size);
    w.i32(h.position_offset_placeholder);
    w.u32(0);
    for (auto b : kv.token_bits) w.u8(static_cast<std::uint8_t>(bits_of(b)));
    w.f64(card.stats.average_bits);
    w.u64(card.stats.payload_bytes);
    w.u64(card.stats.fp16_equivalent_bytes);
    w.f64(card.stats.compression_ratio);
    for (const auto& g : kv.key_groups) write_group(w, g);
    for (const auto& g : kv.value_groups) write_group(w, g);
    w.u32(crc32(w.bytes()));
    return std::move(w).take();
}

CacheCard decode_card(ByteView bytes) {
    try {
        ByteReader r(bytes, ErrorCode::truncated);
        auto magic = r.raw(4);
        if (std::memcmp(magic.data(), card_magic, 4) != 0) card_fail(ErrorCode::bad_magic, "not a QKVC card");
        CacheCard card;
        card.header.version = r.u16();
        if (card.header.version != card_version)
            card_fail(ErrorCode::unsupported_version, "QKVC version " + std::to_string(card.header.version));
        if (r.u16() != 0) card_fail(ErrorCode::malformed, "reserved header field is non-zero");
        card.header.model_id = r.short_string();
        card.header.sender_id = r.short_string();
        auto& kv = card.kv;
        kv.dims.tokens = r.u32();
        kv.dims.layers = r.u32();
        kv.dims.heads = r.u32();
        kv.dims.head_dim = r.u32();
        kv.group_size = r.u32();
        card.header.position_offset_placeholder = r.i32();
        if (r.u32() != 0) card_fail(ErrorCode::malformed, "reserved header field is non-zero");
        if (!kv.dims.valid() || kv.group_size == 0) card_fail(ErrorCode::malformed, "card declares a zero dimension");

        auto widths = r.raw(kv.dims.tokens);
        kv.token_bits.reserve(kv.dims.tokens);
        for (auto b : widths) {
            if (!is_legal_bits(b)) card_fail(ErrorCode::malformed, "illegal token bit width " + std::to_string(b));
            kv.token_bits.push_back(static_cast<BitWidth>(b));
        }

        // Every element costs at least 2 bits in each of the two tensors; reject
        // headers whose payload cannot possibly fit before sizing anything.
        const long double elements = static_cast<long double>(kv.dims.layers) * kv.dims.heads * kv.dims.tokens * kv.dims.head_dim;
        if (elements / 2 > static_cast<long double>(bytes.size())) card_fail(ErrorCode::truncated, "card shorter than its declared payload");
        const std::size_t payload = expected_payload_bytes(kv.dims, kv.token_bits, kv.group_size);
        const std::size_t expected = r.position() + stats_block_bytes + payload + 4;
        if (bytes.size() < expected)
            card_fail(ErrorCode::truncated, "card has " + std::to_string(bytes.size()) + " bytes, layout requires " + std::to_string(expected));
        if (bytes.size() > expected) card_fail(ErrorCode::malformed, "trailing bytes after card");

        std::uint32_t stored_crc = 0;
        for (int i = 0; i < 4; ++i) stored_crc |= std::uint32_t{bytes[expected - 4 + static_cast<std::size_t>(i)]} << (8 * i);
        if (crc32(bytes.first(expected - 4)) != stored_crc) card_fail(ErrorCode::crc_mismatch, "card checksum mismatch");

        card.stats.average_bits = r.f64();
        card.stats.payload_bytes = r.u64();
        card.stats.fp16_equivalent_bytes = r.u64();
        card.stats.compression_ratio = r.f64();

        const auto& d = kv.dims;
        kv.key_groups.reserve(std::size_t{d.layers} * d.heads * d.head_dim * blocks(d.tokens, kv.group_size));
        for (std::size_t lhc = 0; lhc < std::size_t{d.layers} * d.heads * d.head_dim; ++lhc)
            for (std::uint32_t first = 0; first < d.tokens; first += kv.group_size) {
                const std::uint32_t count = std::min(kv.group_size, d.tokens - first);
                kv.key_groups.push_back(read_group(r, key_block_bits(kv.token_bits, first, count), count));
            }
        kv.value_groups.reserve(d.rows() * blocks(d.head_dim, kv.group_size));
        for (std::size_t row = 0; row < d.rows(); ++row)
            for (std::uint32_t first = 0; first < d.head_dim; first += kv.group_size)
                kv.value_groups.push_back(read_group(r, kv.token_bits[row % d.tokens], std::min(kv.group_size, d.head_dim - first)));

        if (!(card.stats == compute_stats(kv))) card_fail(ErrorCode::malformed, "stored stats disagree with payload");
        return card;
    } catch (const CardError&) {
        throw;
    } catch (const Error& e) {
        throw CardError(e.code(), e.detail());
    }
}

std::uint32_t card_checksum(ByteView encoded) {
    if (encoded.size() < 4) throw CardError(ErrorCode::truncated, "card shorter than its checksum");
    ByteReader r(encoded.last(4));
    return r.u32();
}

CardStats card_stats(const CacheCard& card) {
    if (!(card.stats == compute_stats(card.kv))) fail(ErrorCode::malformed, "stored card stats disagree with payload");
    return card.stats;
}

}  // namespace qkv
