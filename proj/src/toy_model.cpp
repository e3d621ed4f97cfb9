#include "qkv/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qkv/rng.hpp"

namespace qkv {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale) {
    Matrix m(rows, cols);
    SplitMix64 rng(seed);
    for (auto& v : m.data) v = scale * rng.standard_normal();
    return m;
}

ToyModel::ToyModel(ToyModelConfig cfg) : cfg_(cfg) {
    require(cfg_.layers >= 1 && cfg_.heads >= 1 && cfg_.head_dim >= 1, ErrorCode::parameter, "toy model dims must be >= 1");
    require(cfg_.temperature > 0.0 && std::isfinite(cfg_.temperature), ErrorCode::parameter, "temperature must be > 0");
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
    const std::size_t d = cfg_.head_dim;
    std::uint64_t label = 0;
    for (std::uint32_t l = 0; l < cfg_.layers; ++l)
        for (std::uint32_t h = 0; h < cfg_.heads; ++h) {
            wq_.push_back(random_matrix(d, d, derive_seed(cfg_.seed, ++label), scale));
            wk_.push_back(random_matrix(d, d, derive_seed(cfg_.seed, ++label), scale));
            wv_.push_back(random_matrix(d, d, derive_seed(cfg_.seed, ++label), scale));
            wo_.push_back(random_matrix(d, d, derive_seed(cfg_.seed, ++label), scale));
        }
}

std::string ToyModel::model_id() const {
    return "toy-v1/L" + std::to_string(cfg_.layers) + "H" + std::to_string(cfg_.heads) + "d" + std::to_string(cfg_.head_dim) +
           "/s" + std::to_string(cfg_.seed);
}

void ToyModel::check_cache(const KVCache& cache) const {
    require(cache.layers() == cfg_.layers && cache.heads() == cfg_.heads && cache.head_dim() == cfg_.head_dim,
            ErrorCode::dimension, "cache dims do not match the toy model");
}

namespace {

// out = x W for a row vector x of width d.
void project(std::span<const double> x, const Matrix& w, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wr = w.data.data() + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wr[j];
    }
}

// In-place numerically stable softmax.
void softmax(std::span<double> s) {
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (auto& v : s) {
        v = std::exp(v - m);
        z += v;
    }
    for (auto& v : s) v /= z;
}

double dot(std::span<const double> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

Matrix ToyModel::forward(const KVCache& cache, const Matrix& queries) const {
    check_cache(cache);
    const std::size_t d = cfg_.head_dim, n = cache.tokens();
    require(queries.cols == d, ErrorCode::dimension, "query width must equal head_dim");
    const double inv = 1.0 / (std::sqrt(static_cast<double>(d)) * cfg_.temperature);
    const double pairs = static_cast<double>(cfg_.layers) * cfg_.heads;

    Matrix out(queries.rows, d);
    std::vector<double> q(d), o(d), po(d), scores(n);
    for (std::uint32_t l = 0; l < cfg_.layers; ++l)
        for (std::uint32_t h = 0; h < cfg_.heads; ++h) {
            const std::size_t s = slot(l, h);
            for (std::size_t i = 0; i < queries.rows; ++i) {
                project(queries.row(i), wq_[s], q);
                for (std::uint32_t t = 0; t < n; ++t) scores[t] = dot(q, cache.key_row(l, h, t)) * inv;
                softmax(scores);
                std::fill(o.begin(), o.end(), 0.0);
                for (std::uint32_t t = 0; t < n; ++t) {
                    auto v = cache.value_row(l, h, t);
                    for (std::size_t c = 0; c < d; ++c) o[c] += scores[t] * v[c];
                }
                project(o, wo_[s], po);
                auto dst = out.row(i);
                for (std::size_t c = 0; c < d; ++c) dst[c] += po[c] / pairs;
            }
        }
    return out;
}

KVCache ToyModel::prefill(const Matrix& embeddings) const {
    const std::size_t d = cfg_.head_dim, n = embeddings.rows;
    require(embeddings.cols == d, ErrorCode::dimension, "embedding width must equal head_dim");
    require(n >= 1, ErrorCode::dimension, "prefill needs at least one token");
    KVCache cache(CacheDims{cfg_.layers, cfg_.heads, static_cast<std::uint32_t>(n), cfg_.head_dim});
    const double inv = 1.0 / (std::sqrt(static_cast<double>(d)) * cfg_.temperature);

    Matrix x = embeddings, mix(n, d), q(n, d);
    std::vector<double> k(d), v(d), o(d), po(d), scores(n);
    for (std::uint32_t l = 0; l < cfg_.layers; ++l) {
        std::fill(mix.data.begin(), mix.data.end(), 0.0);
        for (std::uint32_t h = 0; h < cfg_.heads; ++h) {
            const std::size_t s = slot(l, h);
            for (std::size_t t = 0; t < n; ++t) {
                project(x.row(t), wk_[s], k);
                project(x.row(t), wv_[s], v);
                project(x.row(t), wq_[s], q.row(t));
                auto kr = cache.key_row(l, h, static_cast<std::uint32_t>(t));
                auto vr = cache.value_row(l, h, static_cast<std::uint32_t>(t));
                for (std::size_t c = 0; c < d; ++c) {
                    kr[c] = static_cast<float>(k[c]);
                    vr[c] = static_cast<float>(v[c]);
                }
            }
            // Causal attention: token t sees tokens [0, t].
            for (std::size_t t = 0; t < n; ++t) {
                std::span<double> row(scores.data(), t + 1);
                for (std::size_t j = 0; j <= t; ++j) row[j] = dot(q.row(t), cache.key_row(l, h, static_cast<std::uint32_t>(j))) * inv;
                softmax(row);
                std::fill(o.begin(), o.end(), 0.0);
                for (std::size_t j = 0; j <= t; ++j) {
                    auto vr = cache.value_row(l, h, static_cast<std::uint32_t>(j));
                    for (std::size_t c = 0; c < d; ++c) o[c] += row[j] * vr[c];
                }
                project(o, wo_[s], po);
                auto m = mix.row(t);
                for (std::size_t c = 0; c < d; ++c) m[c] += po[c] / cfg_.heads;
            }
        }
        // Residual + RMS norm feeds the next layer.
        for (std::size_t t = 0; t < n; ++t) {
            auto xr = x.row(t);
            auto m = mix.row(t);
            double ss = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                xr[c] += m[c];
                ss += xr[c] * xr[c];
            }
            const double r = 1.0 / std::sqrt(ss / d + 1e-6);
            for (auto& val : xr) val *= r;
        }
    }
    return cache;
}

AttentionStats ToyModel::observe(const KVCache& cache, const Matrix& queries) const {
    check_cache(cache);
    const std::size_t d = cfg_.head_dim, n = cache.tokens();
    require(queries.cols == d && queries.rows >= 1, ErrorCode::dimension, "observation queries must be [q x head_dim], q >= 1");
    const double inv = 1.0 / (std::sqrt(static_cast<double>(d)) * cfg_.temperature);

    std::vector<double> sum(n, 0.0), sum_sq(n, 0.0), entropy(n, 0.0), q(d), scores(n);
    std::vector<double> key(d);
    double samples = 0.0;
    for (std::uint32_t l = 0; l < cfg_.layers; ++l)
        for (std::uint32_t h = 0; h < cfg_.heads; ++h) {
            const std::size_t s = slot(l, h);
            for (std::size_t i = 0; i < queries.rows; ++i) {
                project(queries.row(i), wq_[s], q);
                for (std::uint32_t t = 0; t < n; ++t) scores[t] = dot(q, cache.key_row(l, h, t)) * inv;
                softmax(scores);
                for (std::size_t t = 0; t < n; ++t) {
                    sum[t] += scores[t];
                    sum_sq[t] += scores[t] * scores[t];
                }
                samples += 1.0;
            }
            // Each cached token attending causally over its prefix, keyed by
            // its own key vector.
            for (std::uint32_t t = 0; t < n; ++t) {
                auto kt = cache.key_row(l, h, t);
                std::copy(kt.begin(), kt.end(), key.begin());
                std::span<double> row(scores.data(), t + 1);
                for (std::uint32_t j = 0; j <= t; ++j) row[j] = dot(key, cache.key_row(l, h, j)) * inv;
                softmax(row);
                double e = 0.0;
                for (double p : row)
                    if (p > 0.0) e -= p * std::log(p);
                entropy[t] += std::max(0.0, e);
            }
        }

    AttentionStats st;
    st.received_weight.resize(n);
    st.weight_variance.resize(n);
    st.query_entropy.resize(n);
    st.quality.assign(n, 0.5);
    const double pairs = static_cast<double>(cfg_.layers) * cfg_.heads;
    for (std::size_t t = 0; t < n; ++t) {
        const double mean = sum[t] / samples;
        st.received_weight[t] = std::clamp(mean, 0.0, 1.0);
        st.weight_variance[t] = std::max(0.0, sum_sq[t] / samples - mean * mean);
        st.query_entropy[t] = entropy[t] / pairs;
    }
    return st;
}

double ToyModel::forward_ops(std::size_t tokens, std::size_t queries) const {
    const double d = cfg_.head_dim;
    const double pairs = static_cast<double>(cfg_.layers) * cfg_.heads;
    // q projection + scores + weighted values + output projection
    return pairs * static_cast<double>(queries) * (2.0 * d * d + 2.0 * static_cast<double>(tokens) * d);
}

double ToyModel::prefill_ops(std::size_t tokens) const {
    const double d = cfg_.head_dim, n = static_cast<double>(tokens);
    const double pairs = static_cast<double>(cfg_.layers) * cfg_.heads;
    // k/v/q/o projections per token + causal scores and weighted values
    return pairs * (4.0 * n * d * d + n * (n + 1.0) * d);
}

double relative_l2_error(const Matrix& approx, const Matrix& reference) {
    require(approx.rows == reference.rows && approx.cols == reference.cols, ErrorCode::dimension, "matrix shapes differ");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < approx.data.size(); ++i) {
        const double diff = approx.data[i] - reference.data[i];
        num += diff * diff;
        den += reference.data[i] * reference.data[i];
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

}  // namespace qkv
