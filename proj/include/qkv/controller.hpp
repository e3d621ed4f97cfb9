#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "qkv/bytes.hpp"
#include "qkv/importance.hpp"
#include "qkv/quantizer.hpp"

namespace qkv {

// Two dense layers, 6 -> 46 (ReLU) -> 4 logits over {2,4,8,16}.
struct ControllerWeights {
    static constexpr std::size_t inputs = feature_count;
    static constexpr std::size_t hidden = 46;
    static constexpr std::size_t outputs = 4;
    static constexpr std::size_t parameter_count = inputs * hidden + hidden + hidden * outputs + outputs;  // 510

    // Row-major: w1[i * hidden + j] connects input i to hidden unit j,
    // w2[j * outputs + k] connects hidden unit j to logit k.
    std::vector<double> w1 = std::vector<double>(inputs * hidden, 0.0);
    std::vector<double> b1 = std::vector<double>(hidden, 0.0);
    std::vector<double> w2 = std::vector<double>(hidden * outputs, 0.0);
    std::vector<double> b2 = std::vector<double>(outputs, 0.0);

    // Flat view in the order w1, b1, w2, b2.
    std::vector<double> flatten() const;
    static ControllerWeights unflatten(std::span<const double> flat);

    void validate() const;  // model error on non-finite weights

    friend bool operator==(const ControllerWeights&, const ControllerWeights&) = default;
};

std::array<double, ControllerWeights::outputs> controller_logits(const FeatureRow& x, const ControllerWeights& w);

// Per-token argmax over the four logits; ties resolve toward fewer bits.
std::vector<BitWidth> controller_infer(const TokenFeatures& features, const ControllerWeights& w);

struct TrainConfig {
    std::uint64_t seed = 1;
    std::size_t epochs = 600;
    double learning_rate = 0.02;  // Adam, constant schedule
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    // Weight each class by n / (classes_present * count) so rare widths are
    // not drowned out.
    bool balance_classes = true;
};

struct TrainResult {
    ControllerWeights weights;
    double final_loss = 0.0;
    double training_accuracy = 0.0;
};

// Mean (class-weighted) softmax cross-entropy and its analytic gradient in
// flatten() order.
struct LossGradient {
    double loss = 0.0;
    std::vector<double> gradient;
};
LossGradient controller_loss(const ControllerWeights& w, std::span<const FeatureRow> rows, std::span<const BitWidth> labels,
                             std::span<const double> class_weights);

std::vector<double> class_weights_for(std::span<const BitWidth> labels, bool balance);

ControllerWeights initial_weights(std::uint64_t seed);

// Full-batch Adam on the cross-entropy loss; deterministic for a fixed seed.
TrainResult controller_train(std::span<const FeatureRow> rows, std::span<const BitWidth> labels, const TrainConfig& cfg = {});

double label_accuracy(std::span<const BitWidth> predicted, std::span<const BitWidth> labels);

// QKVW flat weight file.
inline constexpr char weights_magic[4] = {'Q', 'K', 'V', 'W'};
inline constexpr std::uint16_t weights_version = 1;
Bytes encode_weights(const ControllerWeights& w);
ControllerWeights decode_weights(ByteView bytes);

}  // namespace qkv
