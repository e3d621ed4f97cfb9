#include <gtest/gtest.h>

#include <cmath>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "qkv/tensorio.hpp"

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

SyntheticConfig small(std::uint64_t seed) {
    SyntheticConfig c;
    c.seed = seed;
    c.layers = 2;
    c.heads = 2;
    c.tokens = 8;
    c.head_dim = 4;
    return c;
}

}  // namespace

TEST(Synthetic, ShapeAndDeterminism) {
    const KVCache a = generate_synthetic_cache(small(7));
    const KVCache b = generate_synthetic_cache(small(7));
    EXPECT_EQ(a.dims(), (CacheDims{2, 2, 8, 4}));
    EXPECT_EQ(a.keys().size(), 2u * 2 * 8 * 4);
    EXPECT_TRUE(a.bit_identical(b));
    EXPECT_EQ(encode_container(a), encode_container(b));
}

TEST(Synthetic, DifferentSeedsDiffer) {
    EXPECT_FALSE(generate_synthetic_cache(small(7)).bit_identical(generate_synthetic_cache(small(8))));
}

TEST(Synthetic, RejectsZeroValueScale) {
    auto c = small(1);
    c.value_scale = 0.0;
    EXPECT_EQ(code_of([&] { generate_synthetic_cache(c); }), ErrorCode::parameter);
}

TEST(Synthetic, ElementCapRaisesSizeError) {
    auto c = small(1);
    c.max_elements = 100;
    EXPECT_EQ(code_of([&] { generate_synthetic_cache(c); }), ErrorCode::size);
}

TEST(Synthetic, MomentsFollowValueScale) {
    SyntheticConfig c;
    c.seed = 3;
    c.tokens = 512;
    c.head_dim = 32;
    c.value_scale = 2.5;
    const KVCache k = generate_synthetic_cache(c);
    for (auto span : {k.keys(), k.values()}) {
        double s = 0, sq = 0;
        for (float v : span) {
            s += v;
            sq += double(v) * v;
        }
        const double n = static_cast<double>(span.size());
        EXPECT_NEAR(s / n, 0.0, 0.05);
        EXPECT_NEAR(std::sqrt(sq / n - (s / n) * (s / n)), 2.5, 0.1);
    }
}

TEST(AttentionStatsGen, HeavyHittersGetTwiceTheMean) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticConfig c;
        c.seed = seed;
        c.tokens = 64;
        c.heavy_hitter_fraction = 0.125;
        const KVCache k = generate_synthetic_cache(c);
        const AttentionStats s = generate_attention_stats(c, k);
        EXPECT_NO_THROW(s.validate());
        ASSERT_EQ(s.heavy_hitters.size(), 8u);
        const double mean = std::accumulate(s.received_weight.begin(), s.received_weight.end(), 0.0) / 64.0;
        for (auto t : s.heavy_hitters) EXPECT_GE(s.received_weight[t], 2.0 * mean);
        EXPECT_TRUE(std::ranges::is_sorted(s.heavy_hitters));
    }
}

TEST(AttentionStatsGen, NoHeavyHittersIsNearlyUniform) {
    SyntheticConfig c;
    c.seed = 11;
    c.tokens = 128;
    c.heavy_hitter_fraction = 0.0;
    const AttentionStats s = generate_attention_stats(c, generate_synthetic_cache(c));
    const auto [lo, hi] = std::ranges::minmax(s.received_weight);
    EXPECT_GT(lo, 0.0);
    EXPECT_LT(hi / lo, 3.0);
}

TEST(AttentionStatsGen, SingleToken) {
    SyntheticConfig c;
    c.tokens = 1;
    const AttentionStats s = generate_attention_stats(c, generate_synthetic_cache(c));
    EXPECT_EQ(s.received_weight, std::vector<double>{1.0});
    EXPECT_EQ(s.weight_variance, std::vector<double>{0.0});
}

TEST(AttentionStatsGen, QuarterOfEightIsTwo) {
    auto c = small(5);
    c.heavy_hitter_fraction = 0.25;
    EXPECT_EQ(generate_attention_stats(c, generate_synthetic_cache(c)).heavy_hitters.size(), 2u);
}

TEST(AttentionStatsGen, ShapeMismatchIsDimensionError) {
    auto c = small(5);
    const KVCache k = generate_synthetic_cache(c);
    c.tokens = 9;
    EXPECT_EQ(code_of([&] { generate_attention_stats(c, k); }), ErrorCode::dimension);
}

TEST(AttentionStatsGen, Deterministic) {
    auto c = small(9);
    const KVCache k = generate_synthetic_cache(c);
    EXPECT_EQ(generate_attention_stats(c, k), generate_attention_stats(c, k));
}

// Header bytes built by hand from the documented layout.
TEST(Container, ByteLayout) {
    const CacheDims d{1, 1, 2, 1};
    const KVCache k(d, {1.0f, -2.0f}, {0.5f, 3.0f});
    const Bytes b = encode_container(k);
    const Bytes expected{'Q', 'K', 'V', 'T', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0,
                         0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0, 0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x40, 0x40};
    EXPECT_EQ(b, expected);
    EXPECT_EQ(container_header_bytes, 24u);
}

TEST(Container, RoundTripThroughFile) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SyntheticConfig c;
        c.seed = seed;
        c.layers = 1 + seed % 3;
        c.heads = 1 + seed % 2;
        c.tokens = 1 + static_cast<std::uint32_t>(seed * 7);
        c.head_dim = 1 + static_cast<std::uint32_t>(seed * 3);
        const KVCache k = generate_synthetic_cache(c);
        const auto path = (std::filesystem::temp_directory_path() / "qkv_container_rt.qkvt").string();
        const std::size_t n = store_container(k, path);
        EXPECT_EQ(n, 24 + 8 * k.dims().elements());
        EXPECT_TRUE(load_container(path).bit_identical(k));
        std::filesystem::remove(path);
    }
}

TEST(Container, DecodeErrors) {
    const KVCache k = generate_synthetic_cache(small(1));
    Bytes b = encode_container(k);

    Bytes bad = b;
    std::memcpy(bad.data(), "XXXX", 4);
    EXPECT_EQ(code_of([&] { decode_container(bad); }), ErrorCode::bad_magic);

    bad = b;
    bad[4] = 2;
    EXPECT_EQ(code_of([&] { decode_container(bad); }), ErrorCode::unsupported_version);

    // Header says 10 tokens, payload holds 8.
    bad = b;
    bad[16] = 10;
    EXPECT_EQ(code_of([&] { decode_container(bad); }), ErrorCode::truncated);

    bad = b;
    bad.push_back(0);
    EXPECT_EQ(code_of([&] { decode_container(bad); }), ErrorCode::malformed);

    EXPECT_EQ(code_of([&] { decode_container(ByteView(b).first(10)); }), ErrorCode::truncated);

    bad = b;
    bad[8] = 0;  // zero layers
    EXPECT_EQ(code_of([&] { decode_container(bad); }), ErrorCode::malformed);
}

TEST(KVCacheType, RejectsNonFinite) {
    KVCache k = generate_synthetic_cache(small(2));
    k.values()[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_EQ(code_of([&] { k.check_finite(); }), ErrorCode::data);
    EXPECT_EQ(code_of([&] { KVCache(CacheDims{0, 1, 1, 1}); }), ErrorCode::dimension);
}
