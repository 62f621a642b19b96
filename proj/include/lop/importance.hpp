#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lop/matrix.hpp"
#include "lop/target_model.hpp"

namespace lop {

// Per-layer pruning ratios; theta[l] is the fraction of layer l's hidden neurons removed.
struct PruningConfig {
    std::vector<double> theta;

    std::size_t size() const { return theta.size(); }
    double mean() const;
    friend bool operator==(const PruningConfig&, const PruningConfig&) = default;
};

namespace importance {

enum class Metric { activation_l2, magnitude, wanda };

const char* to_string(Metric metric);
Metric metric_from_string(const std::string& name);

struct ImportanceTable {
    Metric metric = Metric::activation_l2;
    std::vector<std::vector<double>> layers;

    std::vector<std::size_t> widths() const;
    // {"metric": string, "layers": [[floats]]}
    nlohmann::json to_json() const;
    static ImportanceTable from_json(const nlohmann::json& doc);
    friend bool operator==(const ImportanceTable&, const ImportanceTable&) = default;
};

// Root-mean-square activation per neuron: sqrt(mean_i a_ij^2).
ImportanceTable score_activation_l2(std::span<const Matrix> traces);

// L2 norm of the neuron's weight group: W1 row j, b1_j, and W2 column j.
ImportanceTable score_magnitude(const model::TargetModel& model);

// Weight-group L2 norm times the L2 norm of the neuron's calibration activations.
ImportanceTable score_wanda(const model::TargetModel& model, std::span<const Matrix> traces);

// Collects activations when the metric needs them and dispatches.
ImportanceTable compute_importance(const model::TargetModel& model, const model::CalibrationSet& calibration,
                                   Metric metric);

// Keeps the floor((1 - theta_l) * d_l) highest-scoring neurons of every layer.
// Equal scores keep the lower neuron index first.
model::MaskSet config_to_masks(const PruningConfig& config, const ImportanceTable& table,
                               std::span<const std::size_t> widths);

}  // namespace importance
}  // namespace lop
