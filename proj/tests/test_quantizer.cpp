#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "qkv/quantizer.hpp"
#include "qkv/rng.hpp"

using namespace qkv;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::protocol;
}

std::vector<float> random_group(SplitMix64& r, std::size_t n, double lo, double hi) {
    std::vector<float> x(n);
    for (auto& v : x) v = static_cast<float>(r.uniform(lo, hi));
    return x;
}

// Half an ulp of the stored reconstruction: the only slack float storage adds.
double half_ulp(float v) {
    const float a = std::abs(v);
    return 0.5 * (std::nextafter(a, INFINITY) - a);
}

KVCache random_cache(CacheDims d, std::uint64_t seed) {
    KVCache k(d);
    SplitMix64 r(seed);
    for (auto& v : k.keys()) v = static_cast<float>(r.standard_normal());
    for (auto& v : k.values()) v = static_cast<float>(r.standard_normal());
    return k;
}

}  // namespace

TEST(QuantizeGroup, HandComputedTwoBit) {
    const std::vector<float> x{0, 1, 2, 3};
    const auto q = quantize_group(x, BitWidth::b2);
    EXPECT_EQ(q.scale, 1.0f);
    EXPECT_EQ(q.zero_point, 0.0f);
    EXPECT_EQ(unpack_codes(q.codes, 2, 4), (std::vector<std::uint8_t>{0, 1, 2, 3}));
    EXPECT_EQ(dequantize_group(q), x);
}

TEST(QuantizeGroup, ConstantGroup) {
    const std::vector<float> x{5, 5, 5};
    for (auto b : {BitWidth::b2, BitWidth::b4, BitWidth::b8}) {
        const auto q = quantize_group(x, b);
        EXPECT_EQ(q.scale, 0.0f);
        EXPECT_EQ(unpack_codes(q.codes, bits_of(b), 3), (std::vector<std::uint8_t>{0, 0, 0}));
        EXPECT_EQ(dequantize_group(q), x);
    }
    QuantizedGroup q;
    q.bits = BitWidth::b4;
    q.scale = 0.0f;
    q.zero_point = 7.0f;
    q.length = 3;
    q.codes = pack_codes(std::vector<std::uint8_t>{0, 0, 0}, 4);
    EXPECT_EQ(dequantize_group(q), (std::vector<float>{7, 7, 7}));
}

TEST(QuantizeGroup, SixteenBitIsBitExact) {
    const std::vector<float> x{0.0f, 1.0f, -0.0f, 1e-38f, 3.4e38f, 0.1f};
    const auto q = quantize_group(x, BitWidth::b16);
    EXPECT_EQ(q.scale, 0.0f);
    const auto y = dequantize_group(q);
    ASSERT_EQ(y.size(), x.size());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * 4), 0);
}

TEST(QuantizeGroup, AffineRuleAndBound) {
    SplitMix64 r(99);
    for (int trial = 0; trial < 300; ++trial) {
        for (auto b : {BitWidth::b2, BitWidth::b4, BitWidth::b8}) {
            const auto x = random_group(r, 1 + trial % 40, -1.0, 1.0);
            const auto q = quantize_group(x, b);
            const auto [lo, hi] = std::ranges::minmax(x);
            const double top = (1u << bits_of(b)) - 1;
            EXPECT_EQ(q.zero_point, lo);
            // The stored scale is the float nearest (max-min)/top, or within a
            // few ulps of it when nudged to a requantization-stable value.
            EXPECT_NEAR(q.scale, (double(hi) - lo) / top, 64 * std::abs(std::nextafter(q.scale, INFINITY) - q.scale));
            const auto codes = unpack_codes(q.codes, bits_of(b), x.size());
            const auto y = dequantize_group(q);
            for (std::size_t i = 0; i < x.size(); ++i) {
                ASSERT_LE(codes[i], top);
                EXPECT_LE(std::abs(double(x[i]) - y[i]), q.scale / 2.0 + half_ulp(y[i]));
            }
        }
    }
}

TEST(QuantizeGroup, FourBitBoundOnUnitInterval) {
    SplitMix64 r(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto x = random_group(r, 32, -1.0, 1.0);
        const auto q = quantize_group(x, BitWidth::b4);
        const auto y = dequantize_group(q);
        const auto [lo, hi] = std::ranges::minmax(x);
        double worst = 0;
        for (std::size_t i = 0; i < 32; ++i) worst = std::max(worst, std::abs(double(x[i]) - y[i]));
        EXPECT_LE(worst, (double(hi) - lo) / 15 / 2 * (1 + 1e-6));
    }
}

TEST(QuantizeGroup, BoundShrinksWithWidth) {
    SplitMix64 r(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = random_group(r, 32, -3.0, 2.0);
        const float s2 = quantize_group(x, BitWidth::b2).scale;
        const float s4 = quantize_group(x, BitWidth::b4).scale;
        const float s8 = quantize_group(x, BitWidth::b8).scale;
        EXPECT_GT(s2, s4);
        EXPECT_GT(s4, s8);
    }
}

TEST(QuantizeGroup, RejectsNonFiniteAndEmpty) {
    const std::vector<float> x{1.0f, std::numeric_limits<float>::infinity()};
    EXPECT_EQ(code_of([&] { quantize_group(x, BitWidth::b4); }), ErrorCode::data);
    EXPECT_EQ(code_of([&] { quantize_group(std::vector<float>{}, BitWidth::b4); }), ErrorCode::parameter);
}

TEST(QuantizeGroup, RequantizingAReconstructionIsIdempotent) {
    SplitMix64 r(17);
    for (int trial = 0; trial < 500; ++trial)
        for (auto b : {BitWidth::b2, BitWidth::b4, BitWidth::b8}) {
            const auto x = random_group(r, 32, -5.0, 7.0);
            const auto y = dequantize_group(quantize_group(x, b));
            EXPECT_EQ(dequantize_group(quantize_group(y, b)), y);
        }
}

TEST(Packing, HandPackedByte) {
    EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{1, 2, 3, 0}, 2), Bytes{0x39});
    EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{0xA, 0x5}, 4), Bytes{0x5A});
    EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{1, 2, 3}, 2), Bytes{0x39});
    EXPECT_TRUE(pack_codes(std::vector<std::uint8_t>{}, 4).empty());
}

TEST(Packing, RoundTripAndSize) {
    SplitMix64 r(1);
    for (int bits : {2, 4, 8})
        for (std::size_t n = 0; n < 70; ++n) {
            std::vector<std::uint8_t> c(n);
            for (auto& v : c) v = static_cast<std::uint8_t>(r.below(1u << bits));
            const Bytes p = pack_codes(c, bits);
            EXPECT_EQ(p.size(), (n * bits + 7) / 8);
            EXPECT_EQ(unpack_codes(p, bits, n), c);
        }
}

TEST(Packing, Errors) {
    EXPECT_EQ(code_of([] { pack_codes(std::vector<std::uint8_t>{4}, 2); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { unpack_codes(Bytes{0x00}, 4, 3); }), ErrorCode::truncated);
}

TEST(AnalyticError, ClosedForms) {
    EXPECT_NEAR(analytic_error(BitWidth::b4, 1.0), (1.0 / 15) * (1.0 / 15) / 12, 1e-15);
    EXPECT_NEAR(analytic_error(BitWidth::b4, 1.0), 3.704e-4, 1e-7);
    EXPECT_DOUBLE_EQ(analytic_error(BitWidth::b2, 3.0), 1.0 / 12);
    EXPECT_EQ(analytic_error(BitWidth::b8, 0.0), 0.0);
    EXPECT_EQ(analytic_error(BitWidth::b16, 5.0), 0.0);
}

TEST(QuantizeCache, SixteenBitIdentity) {
    const KVCache k = random_cache({2, 2, 37, 5}, 3);
    const std::vector<BitWidth> bits(37, BitWidth::b16);
    EXPECT_TRUE(dequantize_cache(quantize_cache(k, bits)).bit_identical(k));
}

// Independent oracle: recompute each group's bound from the layout rules
// (keys per channel in blocks of g tokens, values per token in blocks of g dims).
TEST(QuantizeCache, UniformFourBitWithinGroupBounds) {
    const CacheDims d{2, 3, 70, 40};
    const std::uint32_t g = 32;
    const KVCache k = random_cache(d, 4);
    const std::vector<BitWidth> bits(d.tokens, BitWidth::b4);
    const KVCache y = dequantize_cache(quantize_cache(k, bits, g));
    for (std::uint32_t l = 0; l < d.layers; ++l)
        for (std::uint32_t h = 0; h < d.heads; ++h) {
            for (std::uint32_t c = 0; c < d.head_dim; ++c)
                for (std::uint32_t t0 = 0; t0 < d.tokens; t0 += g) {
                    float lo = INFINITY, hi = -INFINITY;
                    const std::uint32_t t1 = std::min(d.tokens, t0 + g);
                    for (auto t = t0; t < t1; ++t) lo = std::min(lo, k.key_row(l, h, t)[c]), hi = std::max(hi, k.key_row(l, h, t)[c]);
                    const double bound = (double(hi) - lo) / 15 / 2 * (1 + 1e-6);
                    for (auto t = t0; t < t1; ++t) ASSERT_LE(std::abs(double(k.key_row(l, h, t)[c]) - y.key_row(l, h, t)[c]), bound);
                }
            for (std::uint32_t t = 0; t < d.tokens; ++t)
                for (std::uint32_t c0 = 0; c0 < d.head_dim; c0 += g) {
                    const std::uint32_t c1 = std::min(d.head_dim, c0 + g);
                    auto row = k.value_row(l, h, t);
                    const auto [lo, hi] = std::minmax_element(row.begin() + c0, row.begin() + c1);
                    const double bound = (double(*hi) - *lo) / 15 / 2 * (1 + 1e-6);
                    for (auto c = c0; c < c1; ++c) ASSERT_LE(std::abs(double(row[c]) - y.value_row(l, h, t)[c]), bound);
                }
        }
}

TEST(QuantizeCache, MixedAssignmentPerTokenBounds) {
    const CacheDims d{1, 2, 4, 8};
    const KVCache k = random_cache(d, 6);
    const std::vector<BitWidth> bits{BitWidth::b16, BitWidth::b2, BitWidth::b2, BitWidth::b2};
    const QuantizedKV q = quantize_cache(k, bits, 32);
    const KVCache y = dequantize_cache(q);
    for (std::uint32_t h = 0; h < 2; ++h) {
        auto exact = k.value_row(0, h, 0);
        auto got = y.value_row(0, h, 0);
        EXPECT_TRUE(std::equal(exact.begin(), exact.end(), got.begin()));
        for (std::uint32_t t = 1; t < 4; ++t) {
            auto row = k.value_row(0, h, t);
            const auto [lo, hi] = std::ranges::minmax(row);
            for (std::uint32_t c = 0; c < 8; ++c)
                EXPECT_LE(std::abs(double(row[c]) - y.value_row(0, h, t)[c]), (double(hi) - lo) / 3 / 2 * (1 + 1e-6));
        }
    }
    // One key group per channel covers all 4 tokens and takes the widest width.
    for (const auto& g : q.key_groups) EXPECT_EQ(g.bits, BitWidth::b16);
    // Value groups record exactly the requested per-token width.
    for (std::size_t i = 0; i < q.value_groups.size(); ++i) EXPECT_EQ(q.value_groups[i].bits, bits[i % 4]);
}

TEST(QuantizeCache, KeyBlockTakesMaxWidth) {
    const std::vector<BitWidth> b{BitWidth::b2, BitWidth::b8, BitWidth::b4, BitWidth::b2};
    EXPECT_EQ(key_block_bits(b, 0, 2), BitWidth::b8);
    EXPECT_EQ(key_block_bits(b, 2, 2), BitWidth::b4);
    EXPECT_EQ(key_block_bits(b, 3, 1), BitWidth::b2);
}

TEST(QuantizeCache, GroupsCoverEveryElementOnce) {
    const CacheDims d{2, 2, 45, 20};
    const std::uint32_t g = 16;
    const KVCache k = random_cache(d, 2);
    std::vector<BitWidth> bits(45);
    SplitMix64 r(4);
    for (auto& b : bits) b = all_bit_widths[r.below(4)];
    const QuantizedKV q = quantize_cache(k, bits, g);
    std::size_t key_elems = 0, value_elems = 0;
    for (const auto& grp : q.key_groups) key_elems += grp.length;
    for (const auto& grp : q.value_groups) value_elems += grp.length;
    EXPECT_EQ(key_elems, d.elements());
    EXPECT_EQ(value_elems, d.elements());
    EXPECT_EQ(q.key_groups.size(), 2u * 2 * 20 * 3);  // ceil(45/16) blocks per channel
    EXPECT_EQ(q.value_groups.size(), 2u * 2 * 45 * 2);  // ceil(20/16) blocks per token row
    EXPECT_EQ(q.payload_bytes(), expected_payload_bytes(d, bits, g));
    EXPECT_NO_THROW(validate_layout(q));
}

TEST(QuantizeCache, PayloadFormula) {
    // Group payload: ceil(g*b/8) codes + 8 bytes (scale, zero point); raw f32 at 16 bits.
    EXPECT_EQ(group_payload_bytes(BitWidth::b4, 32), 16u + 8u);
    EXPECT_EQ(group_payload_bytes(BitWidth::b2, 5), 2u + 8u);
    EXPECT_EQ(group_payload_bytes(BitWidth::b8, 3), 3u + 8u);
    EXPECT_EQ(group_payload_bytes(BitWidth::b16, 7), 28u);
}

TEST(QuantizeCache, AssignmentLengthMismatch) {
    const KVCache k = random_cache({1, 1, 4, 4}, 1);
    const std::vector<BitWidth> bits(3, BitWidth::b4);
    EXPECT_EQ(code_of([&] { quantize_cache(k, bits); }), ErrorCode::dimension);
}

TEST(QuantizeCache, ValidateLayoutCatchesTampering) {
    const KVCache k = random_cache({1, 1, 4, 4}, 1);
    const std::vector<BitWidth> bits(4, BitWidth::b4);
    QuantizedKV q = quantize_cache(k, bits);
    q.value_groups[0].codes.pop_back();
    EXPECT_EQ(code_of([&] { validate_layout(q); }), ErrorCode::malformed);
}

TEST(BitWidths, LegalSet) {
    EXPECT_TRUE(is_legal_bits(2));
    EXPECT_FALSE(is_legal_bits(3));
    EXPECT_EQ(to_bit_width(8), BitWidth::b8);
    EXPECT_EQ(code_of([] { to_bit_width(5); }), ErrorCode::parameter);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(width_index(width_from_index(i)), i);
}
