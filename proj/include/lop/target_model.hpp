#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lop/autodiff.hpp"
#include "lop/matrix.hpp"

namespace lop::model {

struct TargetModelSpec {
    std::size_t num_layers = 6;
    std::vector<std::size_t> hidden_widths = std::vector<std::size_t>(6, 64);
    std::size_t input_dim = 16;
    std::size_t num_classes = 4;
    ad::Activation activation = ad::Activation::relu;
    bool residual = true;

    static TargetModelSpec uniform(std::size_t layers, std::size_t width, std::size_t input_dim = 16,
                                   std::size_t num_classes = 4, bool residual = true,
                                   ad::Activation activation = ad::Activation::relu);
    // Throws std::invalid_argument when L < 1, a width is < 2, or sizes disagree.
    void validate() const;
    std::size_t total_hidden() const;

    nlohmann::json to_json() const;
    static TargetModelSpec from_json(const nlohmann::json& doc);
    friend bool operator==(const TargetModelSpec&, const TargetModelSpec&) = default;
};

// Binary keep vectors, one per FFN block. A 1 keeps the hidden neuron.
struct MaskSet {
    std::vector<std::vector<std::uint8_t>> keep;

    static MaskSet all_ones(std::span<const std::size_t> widths);
    static MaskSet all_zeros(std::span<const std::size_t> widths);
    std::size_t layers() const { return keep.size(); }
    std::size_t kept(std::size_t layer) const;
    friend bool operator==(const MaskSet&, const MaskSet&) = default;
};

// Number of neurons a layer of width d keeps at pruning ratio theta: floor((1 - theta) * d),
// evaluated with 1e-9 of slack so decimal ratios give the decimal answer.
std::size_t keep_count(double theta, std::size_t width);

struct CalibrationSet {
    std::vector<std::vector<double>> inputs;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
    void validate(std::size_t input_dim, std::size_t num_classes) const;
    CalibrationSet subset(std::span<const std::size_t> indices) const;

    nlohmann::json to_json() const;
    static CalibrationSet from_json(const nlohmann::json& doc);
    friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;
};

struct BlobsConfig {
    std::size_t num_classes = 4;
    std::size_t dim = 16;
    // Distance of every class mean from the origin, in units of the within-class sigma.
    // Means lie on orthogonal axes.
    double separation = 4.0;
    double sigma = 1.0;
};

// Seeded Gaussian blobs; labels are drawn uniformly.
CalibrationSet make_blobs(const BlobsConfig& config, std::size_t count, std::uint64_t seed);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::size_t> correct_per_class;
    std::vector<std::size_t> total_per_class;
    std::size_t correct = 0;
    std::size_t count = 0;
};

// Stack of FFN blocks over a residual stream of width input_dim, followed by a
// linear classifier head. Per block l:
//   h = act(W1 x + b1),  y = W2 h + b2,  x' = x + y (or x' = y without residual).
// W1 is d x input_dim (row j feeds neuron j), W2 is input_dim x d (column j reads
// neuron j). A block that keeps zero neurons is removed entirely, including b2.
class TargetModel {
public:
    TargetModel() = default;
    TargetModel(TargetModelSpec spec, ad::ParameterStore params);

    const TargetModelSpec& spec() const { return spec_; }
    ad::ParameterStore& params() { return params_; }
    const ad::ParameterStore& params() const { return params_; }
    std::size_t layers() const { return spec_.num_layers; }
    std::size_t width(std::size_t layer) const { return spec_.hidden_widths.at(layer); }

    const Matrix& w1(std::size_t layer) const;
    const Matrix& b1(std::size_t layer) const;
    const Matrix& w2(std::size_t layer) const;
    const Matrix& b2(std::size_t layer) const;
    const Matrix& head_w() const;
    const Matrix& head_b() const;

    // Dense forward of one sample; logits has num_classes entries.
    void logits(std::span<const double> x, std::span<double> out) const;

    // Physically smaller model containing only the kept neurons, in index order.
    // Widths may become zero here, unlike in user-facing specs.
    TargetModel shrink(const MaskSet& masks) const;

    // Model parameters and spec: {"spec": {...}, "tensors": [...]}.
    nlohmann::json to_json() const;
    static TargetModel from_json(const nlohmann::json& doc);
    std::string fingerprint() const;

    static std::string param_name(std::size_t layer, const char* tensor);

private:
    TargetModelSpec spec_;
    ad::ParameterStore params_;
};

// Deterministic Glorot-uniform initialization, a = sqrt(6 / (fan_in + fan_out)).
TargetModel build_model(const TargetModelSpec& spec, std::uint64_t seed);

// Same-width model that zeroes pruned hidden units instead of removing them.
class MaskedModel {
public:
    MaskedModel(const TargetModel& model, MaskSet masks);

    void logits(std::span<const double> x, std::span<double> out) const;
    const MaskSet& masks() const { return masks_; }

private:
    const TargetModel* model_;
    MaskSet masks_;
};

MaskedModel apply_masks(const TargetModel& model, const MaskSet& masks);

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

EvalResult evaluate(const TargetModel& model, const MaskSet& masks, const CalibrationSet& eval_set);
EvalResult evaluate_dense(const TargetModel& model, const CalibrationSet& eval_set);

// Post-activation hidden values: one N x d^l matrix per block.
std::vector<Matrix> collect_activations(const TargetModel& model, const CalibrationSet& calibration);

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    double train_accuracy = 0.0;
    std::vector<double> epoch_losses;
};

// Minibatch Adam on softmax cross-entropy. Throws std::runtime_error naming the
// epoch if the loss stops being finite.
PretrainResult pretrain(TargetModel& model, const CalibrationSet& train_set, const PretrainConfig& config);

}  // namespace lop::model
