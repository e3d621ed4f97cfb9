#include "qkv/tensorio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "qkv/rng.hpp"

namespace qkv {

namespace {

// Stream labels for derive_seed so keys, values and attention draws never
// overlap.
constexpr std::uint64_t stream_keys = 1;
constexpr std::uint64_t stream_values = 2;
constexpr std::uint64_t stream_heavy = 3;
constexpr std::uint64_t stream_mass = 4;
constexpr std::uint64_t stream_quality = 5;

void check_dims(const CacheDims& d) {
    require(d.valid(), ErrorCode::dimension, "all cache dimensions must be >= 1");
}

}  // namespace

KVCache::KVCache(CacheDims dims) : dims_(dims) {
    check_dims(dims_);
    keys_.assign(dims_.elements(), 0.0f);
    values_.assign(dims_.elements(), 0.0f);
}

KVCache::KVCache(CacheDims dims, std::vector<float> keys, std::vector<float> values)
    : dims_(dims), keys_(std::move(keys)), values_(std::move(values)) {
    check_dims(dims_);
    require(keys_.size() == dims_.elements() && values_.size() == dims_.elements(), ErrorCode::dimension,
            "key/value tensor size does not match dims");
}

void KVCache::check_finite() const {
    auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(keys_.begin(), keys_.end(), finite) || !std::all_of(values_.begin(), values_.end(), finite))
        fail(ErrorCode::data, "cache contains non-finite elements");
}

bool KVCache::bit_identical(const KVCache& other) const {
    return dims_ == other.dims_ && keys_.size() == other.keys_.size() &&
           std::memcmp(keys_.data(), other.keys_.data(), keys_.size() * sizeof(float)) == 0 &&
           std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(float)) == 0;
}

void AttentionStats::validate() const {
    const std::size_t n = received_weight.size();
    require(weight_variance.size() == n && query_entropy.size() == n && quality.size() == n, ErrorCode::dimension,
            "attention stats vectors differ in length");
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        require(std::isfinite(received_weight[t]) && std::isfinite(weight_variance[t]) &&
                    std::isfinite(query_entropy[t]) && std::isfinite(quality[t]),
                ErrorCode::data, "attention stats contain non-finite entries");
        require(received_weight[t] >= 0.0 && received_weight[t] <= 1.0, ErrorCode::data, "received_weight outside [0,1]");
        require(weight_variance[t] >= 0.0, ErrorCode::data, "negative weight_variance");
        require(query_entropy[t] >= 0.0, ErrorCode::data, "negative query_entropy");
        require(quality[t] >= 0.0 && quality[t] <= 1.0, ErrorCode::data, "quality outside [0,1]");
        total += received_weight[t];
    }
    require(total <= static_cast<double>(n) + 1e-9, ErrorCode::data, "received_weight sums above n");
}

void SyntheticConfig::validate() const {
    require(layers >= 1 && heads >= 1 && tokens >= 1 && head_dim >= 1, ErrorCode::parameter,
            "synthetic config counts must be >= 1");
    require(value_scale > 0.0 && std::isfinite(value_scale), ErrorCode::parameter, "value_scale must be > 0");
    require(heavy_hitter_fraction >= 0.0 && heavy_hitter_fraction <= 1.0, ErrorCode::parameter,
            "heavy_hitter_fraction must lie in [0,1]");
    // Overflow-safe product check against the cap.
    std::size_t prod = 1;
    for (std::size_t v : {std::size_t{layers}, std::size_t{heads}, std::size_t{tokens}, std::size_t{head_dim}}) {
        if (prod > max_elements / v) fail(ErrorCode::size, "cache dimensions exceed the element cap");
        prod *= v;
    }
}

KVCache generate_synthetic_cache(const SyntheticConfig& cfg) {
    cfg.validate();
    KVCache cache(cfg.dims());
    SplitMix64 key_rng(derive_seed(cfg.seed, stream_keys));
    for (float& v : cache.keys()) v = static_cast<float>(cfg.value_scale * key_rng.standard_normal());
    SplitMix64 value_rng(derive_seed(cfg.seed, stream_values));
    for (float& v : cache.values()) v = static_cast<float>(cfg.value_scale * value_rng.standard_normal());
    return cache;
}

AttentionStats generate_attention_stats(const SyntheticConfig& cfg, const KVCache& cache) {
    cfg.validate();
    require(cache.dims() == cfg.dims(), ErrorCode::dimension, "cache shape does not match synthetic config");

    const std::uint32_t n = cfg.tokens;
    const std::uint32_t heads = cfg.heads;
    AttentionStats s;

    // Heavy hitters: a seeded partial Fisher-Yates pick of round(f*n) tokens.
    const auto heavy_count = static_cast<std::uint32_t>(std::llround(cfg.heavy_hitter_fraction * n));
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    SplitMix64 pick(derive_seed(cfg.seed, stream_heavy));
    for (std::uint32_t i = 0; i < heavy_count; ++i) {
        auto j = i + static_cast<std::uint32_t>(pick.below(n - i));
        std::swap(order[i], order[j]);
    }
    s.heavy_hitters.assign(order.begin(), order.begin() + heavy_count);
    std::sort(s.heavy_hitters.begin(), s.heavy_hitters.end());
    std::vector<bool> heavy(n, false);
    for (auto t : s.heavy_hitters) heavy[t] = true;

    // Ordinary tokens draw a base mass in [1, 1.5) and a per-head jitter in
    // [0.75, 1.25). Heavy tokens get a fixed mass large enough that their
    // per-head share is at least twice the mean share 1/n whenever fewer than
    // half the tokens are heavy: h*(n - 2k) >= 2*(n - k)*1.875.
    SplitMix64 mass(derive_seed(cfg.seed, stream_mass));
    std::vector<double> base(n);
    for (auto& b : base) b = mass.uniform(1.0, 1.5);
    const double k = heavy_count;
    const double heavy_mass = 2.0 * heavy_count < n ? 6.0 * (n - k) / (n - 2.0 * k) : 6.0;

    std::vector<double> sum(n, 0.0), sum_sq(n, 0.0);
    std::vector<double> raw(n);
    for (std::uint32_t h = 0; h < heads; ++h) {
        double z = 0.0;
        for (std::uint32_t t = 0; t < n; ++t) {
            raw[t] = heavy[t] ? heavy_mass : base[t] * mass.uniform(0.75, 1.25);
            z += raw[t];
        }
        for (std::uint32_t t = 0; t < n; ++t) {
            double share = raw[t] / z;
            sum[t] += share;
            sum_sq[t] += share * share;
        }
    }
    s.received_weight.resize(n);
    s.weight_variance.resize(n);
    for (std::uint32_t t = 0; t < n; ++t) {
        double mean = sum[t] / heads;
        s.received_weight[t] = n == 1 ? 1.0 : mean;
        s.weight_variance[t] = n == 1 ? 0.0 : std::max(0.0, sum_sq[t] / heads - mean * mean);
    }

    // Outgoing entropy of token t attending causally over tokens [0, t] with
    // weights proportional to their mass: H = log Z - (sum w log w) / Z.
    s.query_entropy.resize(n);
    double z = 0.0, wlogw = 0.0;
    for (std::uint32_t t = 0; t < n; ++t) {
        double w = heavy[t] ? heavy_mass : base[t];
        z += w;
        wlogw += w * std::log(w);
        s.query_entropy[t] = t == 0 ? 0.0 : std::max(0.0, std::log(z) - wlogw / z);
    }

    SplitMix64 quality(derive_seed(cfg.seed, stream_quality));
    s.quality.resize(n);
    for (auto& q : s.quality) q = quality.uniform();
    return s;
}

Bytes encode_container(const KVCache& cache) {
    const auto& d = cache.dims();
    ByteWriter w;
    w.raw(std::string_view(container_magic, 4));
    w.u16(container_version);
    w.u16(0);
    w.u32(d.layers);
    w.u32(d.heads);
    w.u32(d.tokens);
    w.u32(d.head_dim);
    w.f32_array(cache.keys());
    w.f32_array(cache.values());
    return std::move(w).take();
}

KVCache decode_container(ByteView bytes) {
    ByteReader r(bytes, ErrorCode::truncated);
    auto magic = r.raw(4);
    if (std::memcmp(magic.data(), container_magic, 4) != 0) fail(ErrorCode::bad_magic, "not a QKVT container");
    auto version = r.u16();
    if (version != container_version) fail(ErrorCode::unsupported_version, "QKVT version " + std::to_string(version));
    r.u16();  // reserved
    CacheDims d{r.u32(), r.u32(), r.u32(), r.u32()};
    if (!d.valid()) fail(ErrorCode::malformed, "QKVT header declares a zero dimension");
    const std::size_t payload = 2 * d.elements() * 4;
    if (r.remaining() < payload)
        fail(ErrorCode::truncated, "QKVT payload has " + std::to_string(r.remaining()) + " bytes, header requires " +
                                       std::to_string(payload));
    if (r.remaining() > payload) fail(ErrorCode::malformed, "QKVT payload longer than header dimensions");
    std::vector<float> keys(d.elements()), values(d.elements());
    r.f32_array(keys);
    r.f32_array(values);
    return KVCache(d, std::move(keys), std::move(values));
}

std::size_t store_container(const KVCache& cache, const std::string& path) {
    auto bytes = encode_container(cache);
    write_file(path, bytes);
    return bytes.size();
}

KVCache load_container(const std::string& path) { return decode_container(read_file(path)); }

}  // namespace qkv
