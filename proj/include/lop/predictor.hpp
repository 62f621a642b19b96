#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lop/autodiff.hpp"
#include "lop/importance.hpp"
#include "lop/mcts.hpp"

namespace lop::predictor {

using search::TrainingSample;

enum class Backbone { transformer_ar, transformer_parallel, bilstm, mlp };

const char* to_string(Backbone backbone);
Backbone backbone_from_string(const std::string& name);

// Layer count of the full-size model the predictor architecture was designed for.
inline constexpr std::size_t kReferenceSequenceLength = 28;

struct PredictorConfig {
    Backbone backbone = Backbone::transformer_ar;
    std::size_t sequence_length = 6;  // L, one output per pruned layer
    std::size_t hidden = 128;
    std::size_t encoder_layers = 2;
    std::size_t heads = 4;
    std::size_t ff_multiplier = 4;
    ad::Activation activation = ad::Activation::gelu;

    // Throws std::invalid_argument on zero sizes or hidden % heads != 0.
    void validate() const;
    nlohmann::json to_json() const;
    static PredictorConfig from_json(const nlohmann::json& doc);
    friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

struct TrainConfig {
    std::size_t batch_size = 40;
    std::size_t epochs = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool teacher_forcing = true;

    void validate() const;
};

// Parameters plus the configuration that shapes them. Row-vector convention:
// a linear layer maps x (1 x in) to x W + b with W in x out.
class Predictor {
public:
    Predictor() = default;
    Predictor(PredictorConfig config, ad::ParameterStore params);

    const PredictorConfig& config() const { return config_; }
    ad::ParameterStore& params() { return params_; }
    const ad::ParameterStore& params() const { return params_; }

    // Fingerprint of the dataset the parameters were fitted to; empty when untrained.
    const std::string& dataset_fingerprint() const { return dataset_fingerprint_; }
    void set_dataset_fingerprint(std::string fp) { dataset_fingerprint_ = std::move(fp); }
    bool trained() const { return !dataset_fingerprint_.empty(); }

    // {"backbone", "config", "dataset_fingerprint", "tensors"}
    nlohmann::json to_json() const;
    static Predictor from_json(const nlohmann::json& doc);

private:
    PredictorConfig config_;
    ad::ParameterStore params_;
    std::string dataset_fingerprint_;
};

// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, unit layer-norm gains,
// standard-normal embeddings.
Predictor init_predictor(const PredictorConfig& config, std::uint64_t seed);

// x0 = act(b w1 + b1) w2 + b2, a 1 x d row.
Matrix embed_constraint(double b, const Predictor& predictor);

// Autoregressive transformer. Position 0 holds x0 and position i holds
// theta_i * e_i; a causal encoder maps row i to theta_{i+1} = sigmoid(h_i w + b_out).
// Values in known_prefix replace predictions for the first positions; the rest
// are produced one step at a time from the model's own outputs.
std::vector<double> forward_autoregressive(double b, const Predictor& predictor,
                                           std::span<const double> known_prefix = {});
// Rows x0 + p_i through the encoder without a mask.
std::vector<double> forward_parallel(double b, const Predictor& predictor);
std::vector<double> forward_mlp(double b, const Predictor& predictor);
std::vector<double> forward_bilstm(double b, const Predictor& predictor);
// Dispatches on the configured backbone.
std::vector<double> forward(double b, const Predictor& predictor);

// (1/L) * sum_l (pred_l - target_l)^2
double compute_loss(std::span<const double> prediction, std::span<const double> target);

struct BatchGraph {
    ad::NodeId prediction;  // (B * L) x 1, sample-major
    ad::NodeId loss;        // 1 x 1 mean squared error over the batch
};

// Training graph for a batch of samples. The autoregressive backbone reads the
// label prefixes (teacher forcing) unless teacher_forcing is false, in which case
// every position after x0 carries zero.
BatchGraph build_batch_graph(ad::Graph& graph, const Predictor& predictor, std::span<const TrainingSample> batch,
                             bool teacher_forcing = true);

struct TrainResult {
    Predictor predictor;
    std::vector<double> epoch_losses;  // mean per-sample loss of each epoch
};

// Minibatch Adam. Samples are reshuffled every epoch from the seed. Throws
// std::runtime_error naming the epoch and batch if the loss is not finite.
std::vector<double> train(Predictor& predictor, std::span<const TrainingSample> samples, const TrainConfig& config);
TrainResult train(std::span<const TrainingSample> samples, const PredictorConfig& config,
                  const TrainConfig& train_config);

// epoch,mean_loss rows with a header line.
std::string loss_curve_csv(std::span<const double> epoch_losses);

struct Prediction {
    PruningConfig theta;  // raw model output in (0, 1)^L
    double seconds = 0.0;
};

Prediction predict(double b, const Predictor& predictor);

// Clips into [0.1, 1.0]. While mean > b, shifts the ratios above 0.1 down by an
// equal amount that would close the gap and re-clips at 0.1. Throws
// std::invalid_argument for b < 0.1.
PruningConfig project_to_constraint(const PruningConfig& theta, double b);

}  // namespace lop::predictor
