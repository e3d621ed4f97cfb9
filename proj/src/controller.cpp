#include "qkv/controller.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qkv/rng.hpp"

namespace qkv {

using W = ControllerWeights;

std::vector<double> ControllerWeights::flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count);
    for (const auto* part : {&w1, &b1, &w2, &b2}) flat.insert(flat.end(), part->begin(), part->end());
    return flat;
}

ControllerWeights ControllerWeights::unflatten(std::span<const double> flat) {
    require(flat.size() == parameter_count, ErrorCode::model, "controller expects 510 parameters");
    ControllerWeights w;
    std::size_t off = 0;
    for (auto* part : {&w.w1, &w.b1, &w.w2, &w.b2}) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), part->size(), part->begin());
        off += part->size();
    }
    return w;
}

void ControllerWeights::validate() const {
    require(w1.size() == inputs * hidden && b1.size() == hidden && w2.size() == hidden * outputs && b2.size() == outputs,
            ErrorCode::model, "controller weight shapes are wrong");
    for (const auto* part : {&w1, &b1, &w2, &b2})
        for (double v : *part)
            if (!std::isfinite(v)) fail(ErrorCode::model, "controller weights contain non-finite values");
}

namespace {

struct Activations {
    std::array<double, W::hidden> pre{};
    std::array<double, W::hidden> hidden{};
    std::array<double, W::outputs> logits{};
};

Activations forward(const FeatureRow& x, const W& w) {
    Activations a;
    for (std::size_t j = 0; j < W::hidden; ++j) {
        double s = w.b1[j];
        for (std::size_t i = 0; i < W::inputs; ++i) s += x[i] * w.w1[i * W::hidden + j];
        a.pre[j] = s;
        a.hidden[j] = s > 0.0 ? s : 0.0;
    }
    for (std::size_t k = 0; k < W::outputs; ++k) {
        double s = w.b2[k];
        for (std::size_t j = 0; j < W::hidden; ++j) s += a.hidden[j] * w.w2[j * W::outputs + k];
        a.logits[k] = s;
    }
    return a;
}

std::size_t argmax_low(const std::array<double, W::outputs>& logits) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
        if (logits[k] > logits[best]) best = k;  // strict: ties stay at fewer bits
    return best;
}

}  // namespace

std::array<double, W::outputs> controller_logits(const FeatureRow& x, const W& w) { return forward(x, w).logits; }

std::vector<BitWidth> controller_infer(const TokenFeatures& features, const W& w) {
    w.validate();
    std::vector<BitWidth> out;
    out.reserve(features.size());
    for (const auto& row : features.rows) {
        for (double v : row)
            if (!std::isfinite(v)) fail(ErrorCode::data, "non-finite controller feature");
        out.push_back(width_from_index(static_cast<int>(argmax_low(forward(row, w).logits))));
    }
    return out;
}

std::vector<double> class_weights_for(std::span<const BitWidth> labels, bool balance) {
    std::vector<double> weights(W::outputs, 1.0);
    if (!balance || labels.empty()) return weights;
    std::array<std::size_t, W::outputs> count{};
    for (auto b : labels) ++count[static_cast<std::size_t>(width_index(b))];
    const auto present = static_cast<double>(std::count_if(count.begin(), count.end(), [](std::size_t c) { return c > 0; }));
    for (std::size_t k = 0; k < W::outputs; ++k)
        weights[k] = count[k] ? static_cast<double>(labels.size()) / (present * static_cast<double>(count[k])) : 0.0;
    return weights;
}

LossGradient controller_loss(const W& w, std::span<const FeatureRow> rows, std::span<const BitWidth> labels,
                             std::span<const double> class_weights) {
    require(rows.size() == labels.size() && !rows.empty(), ErrorCode::parameter, "training rows and labels must be non-empty and aligned");
    require(class_weights.size() == W::outputs, ErrorCode::parameter, "need one weight per class");
    LossGradient out;
    W grad;  // zero-initialized
    const double inv_n = 1.0 / static_cast<double>(rows.size());

    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& x = rows[r];
        const auto a = forward(x, w);
        const auto y = static_cast<std::size_t>(width_index(labels[r]));
        const double cw = class_weights[y] * inv_n;

        const double m = *std::max_element(a.logits.begin(), a.logits.end());
        std::array<double, W::outputs> p{};
        double z = 0.0;
        for (std::size_t k = 0; k < W::outputs; ++k) z += (p[k] = std::exp(a.logits[k] - m));
        for (auto& v : p) v /= z;
        out.loss += cw * (std::log(z) + m - a.logits[y]);

        std::array<double, W::outputs> dlogit{};
        for (std::size_t k = 0; k < W::outputs; ++k) dlogit[k] = cw * (p[k] - (k == y ? 1.0 : 0.0));
        std::array<double, W::hidden> dhidden{};
        for (std::size_t j = 0; j < W::hidden; ++j)
            for (std::size_t k = 0; k < W::outputs; ++k) {
                grad.w2[j * W::outputs + k] += a.hidden[j] * dlogit[k];
                dhidden[j] += w.w2[j * W::outputs + k] * dlogit[k];
            }
        for (std::size_t k = 0; k < W::outputs; ++k) grad.b2[k] += dlogit[k];
        for (std::size_t j = 0; j < W::hidden; ++j) {
            if (a.pre[j] <= 0.0) continue;
            grad.b1[j] += dhidden[j];
            for (std::size_t i = 0; i < W::inputs; ++i) grad.w1[i * W::hidden + j] += x[i] * dhidden[j];
        }
    }
    out.gradient = grad.flatten();
    return out;
}

ControllerWeights initial_weights(std::uint64_t seed) {
    // He-style scaling; Irwin-Hall normals from the shared generator.
    W w;
    SplitMix64 rng(derive_seed(seed, 0xC0111));
    const double s1 = std::sqrt(2.0 / W::inputs), s2 = std::sqrt(2.0 / W::hidden);
    for (auto& v : w.w1) v = s1 * rng.standard_normal();
    for (auto& v : w.w2) v = s2 * rng.standard_normal();
    return w;
}

double label_accuracy(std::span<const BitWidth> predicted, std::span<const BitWidth> labels) {
    require(predicted.size() == labels.size(), ErrorCode::dimension, "prediction and label counts differ");
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

TrainResult controller_train(std::span<const FeatureRow> rows, std::span<const BitWidth> labels, const TrainConfig& cfg) {
    if (rows.empty()) fail(ErrorCode::parameter, "empty training set");
    require(rows.size() == labels.size(), ErrorCode::dimension, "training rows and labels differ in count");
    require(cfg.learning_rate > 0.0 && cfg.epochs >= 1, ErrorCode::parameter, "learning rate and epochs must be positive");
    const auto class_weights = class_weights_for(labels, cfg.balance_classes);

    auto params = initial_weights(cfg.seed).flatten();
    std::vector<double> m1(params.size(), 0.0), m2(params.size(), 0.0);
    double b1t = 1.0, b2t = 1.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto lg = controller_loss(W::unflatten(params), rows, labels, class_weights);
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = lg.gradient[i];
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
            const double mh = m1[i] / (1.0 - b1t), vh = m2[i] / (1.0 - b2t);
            params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_epsilon);
        }
    }

    TrainResult result;
    result.weights = W::unflatten(params);
    result.final_loss = controller_loss(result.weights, rows, labels, class_weights).loss;
    TokenFeatures f{std::vector<FeatureRow>(rows.begin(), rows.end())};
    result.training_accuracy = label_accuracy(controller_infer(f, result.weights), labels);
    return result;
}

Bytes encode_weights(const W& w) {
    w.validate();
    ByteWriter out;
    out.raw(std::string_view(weights_magic, 4));
    out.u16(weights_version);
    out.u16(0);
    out.u32(W::inputs);
    out.u32(W::hidden);
    out.u32(W::outputs);
    out.u8(1);  // activation: 1 = ReLU
    for (double v : w.flatten()) out.f64(v);
    out.u32(crc32(out.bytes()));
    return std::move(out).take();
}

ControllerWeights decode_weights(ByteView bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::memcmp(magic.data(), weights_magic, 4) != 0) fail(ErrorCode::bad_magic, "not a QKVW weight file");
    if (auto v = r.u16(); v != weights_version) fail(ErrorCode::unsupported_version, "QKVW version " + std::to_string(v));
    r.u16();
    if (r.u32() != W::inputs || r.u32() != W::hidden || r.u32() != W::outputs)
        fail(ErrorCode::model, "QKVW layer sizes do not match the 6-46-4 controller");
    if (r.u8() != 1) fail(ErrorCode::model, "unsupported controller activation");
    std::vector<double> flat(W::parameter_count);
    for (auto& v : flat) v = r.f64();
    const std::size_t body = r.position();
    const auto stored = r.u32();
    if (r.remaining() != 0) fail(ErrorCode::malformed, "trailing bytes after QKVW body");
    if (crc32(bytes.first(body)) != stored) fail(ErrorCode::crc_mismatch, "QKVW checksum mismatch");
    auto w = W::unflatten(flat);
    w.validate();
    return w;
}

}  // namespace qkv
