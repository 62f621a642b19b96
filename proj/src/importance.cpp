#include "lop/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lop {

double PruningConfig::mean() const {
    if (theta.empty()) throw std::invalid_argument("pruning config: empty theta");
    double s = 0.0;
    for (double t : theta) s += t;
    return s / static_cast<double>(theta.size());
}

namespace importance {

const char* to_string(Metric metric) {
    switch (metric) {
        case Metric::activation_l2: return "activation-l2";
        case Metric::magnitude: return "magnitude";
        case Metric::wanda: return "wanda";
    }
    return "?";
}

Metric metric_from_string(const std::string& name) {
    if (name == "activation-l2") return Metric::activation_l2;
    if (name == "magnitude") return Metric::magnitude;
    if (name == "wanda") return Metric::wanda;
    throw std::invalid_argument("unknown importance metric '" + name + "'");
}

std::vector<std::size_t> ImportanceTable::widths() const {
    std::vector<std::size_t> w;
    for (const auto& l : layers) w.push_back(l.size());
    return w;
}

nlohmann::json ImportanceTable::to_json() const {
    return {{"metric", to_string(metric)}, {"layers", layers}};
}

ImportanceTable ImportanceTable::from_json(const nlohmann::json& doc) {
    ImportanceTable t;
    t.metric = metric_from_string(doc.at("metric").get<std::string>());
    t.layers = doc.at("layers").get<std::vector<std::vector<double>>>();
    for (const auto& layer : t.layers)
        for (double s : layer)
            if (!std::isfinite(s) || s < 0.0) throw std::invalid_argument("importance table: invalid score");
    return t;
}

namespace {

// L2 norm of W1 row j, b1_j and W2 column j.
std::vector<double> weight_group_norms(const model::TargetModel& model, std::size_t l) {
    const Matrix& w1 = model.w1(l);
    const Matrix& b1 = model.b1(l);
    const Matrix& w2 = model.w2(l);
    std::vector<double> out(w1.rows());
    for (std::size_t j = 0; j < w1.rows(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < w1.cols(); ++k) s += w1(j, k) * w1(j, k);
        for (std::size_t i = 0; i < w2.rows(); ++i) s += w2(i, j) * w2(i, j);
        s += b1(0, j) * b1(0, j);
        out[j] = std::sqrt(s);
    }
    return out;
}

void check_traces(std::span<const Matrix> traces) {
    if (traces.empty()) throw std::invalid_argument("importance: no activation traces");
    for (const auto& t : traces) {
        if (t.rows() == 0) throw std::invalid_argument("importance: activation trace has no samples");
    }
}

}  // namespace

ImportanceTable score_activation_l2(std::span<const Matrix> traces) {
    check_traces(traces);
    ImportanceTable table;
    table.metric = Metric::activation_l2;
    for (const auto& t : traces) {
        std::vector<double> scores(t.cols(), 0.0);
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < t.cols(); ++j) scores[j] += t(i, j) * t(i, j);
        for (double& s : scores) s = std::sqrt(s / static_cast<double>(t.rows()));
        table.layers.push_back(std::move(scores));
    }
    return table;
}

ImportanceTable score_magnitude(const model::TargetModel& model) {
    ImportanceTable table;
    table.metric = Metric::magnitude;
    for (std::size_t l = 0; l < model.layers(); ++l) table.layers.push_back(weight_group_norms(model, l));
    return table;
}

ImportanceTable score_wanda(const model::TargetModel& model, std::span<const Matrix> traces) {
    check_traces(traces);
    if (traces.size() != model.layers()) throw std::invalid_argument("wanda: trace count differs from layers");
    ImportanceTable table;
    table.metric = Metric::wanda;
    for (std::size_t l = 0; l < model.layers(); ++l) {
        const Matrix& t = traces[l];
        if (t.cols() != model.width(l)) throw std::invalid_argument("wanda: trace width differs from layer width");
        std::vector<double> scores = weight_group_norms(model, l);
        for (std::size_t j = 0; j < scores.size(); ++j) {
            double a = 0.0;
            for (std::size_t i = 0; i < t.rows(); ++i) a += t(i, j) * t(i, j);
            scores[j] *= std::sqrt(a);
        }
        table.layers.push_back(std::move(scores));
    }
    return table;
}

ImportanceTable compute_importance(const model::TargetModel& model, const model::CalibrationSet& calibration,
                                   Metric metric) {
    if (metric == Metric::magnitude) return score_magnitude(model);
    const auto traces = model::collect_activations(model, calibration);
    return metric == Metric::wanda ? score_wanda(model, traces) : score_activation_l2(traces);
}

model::MaskSet config_to_masks(const PruningConfig& config, const ImportanceTable& table,
                               std::span<const std::size_t> widths) {
    const std::size_t layers = widths.size();
    if (config.size() != layers || table.layers.size() != layers) {
        throw std::invalid_argument("config_to_masks: config has " + std::to_string(config.size()) +
                                    " ratios, table " + std::to_string(table.layers.size()) + " layers, model " +
                                    std::to_string(layers) + " layers");
    }
    model::MaskSet masks;
    std::vector<std::size_t> order;
    for (std::size_t l = 0; l < layers; ++l) {
        const double theta = config.theta[l];
        if (!(theta >= 0.0 && theta <= 1.0)) {
            throw std::invalid_argument("config_to_masks: theta[" + std::to_string(l) + "] = " +
                                        std::to_string(theta) + " is outside [0, 1]");
        }
        const auto& scores = table.layers[l];
        if (scores.size() != widths[l]) throw std::invalid_argument("config_to_masks: score/width mismatch");
        const std::size_t k = model::keep_count(theta, widths[l]);
        order.resize(widths[l]);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (scores[a] != scores[b]) return scores[a] > scores[b];
                              return a < b;
                          });
        std::vector<std::uint8_t> keep(widths[l], 0);
        for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
        masks.keep.push_back(std::move(keep));
    }
    return masks;
}

}  // namespace importance
}  // namespace lop
