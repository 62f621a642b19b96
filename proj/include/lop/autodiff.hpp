#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lop/matrix.hpp"

namespace lop::ad {

struct ParamId {
    std::size_t index = 0;
    friend bool operator==(ParamId, ParamId) = default;
};

struct NodeId {
    std::size_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
};

// Named trainable tensors. Names are unique and insertion order is stable,
// which keeps serialized documents identical across runs.
class ParameterStore {
public:
    ParamId add(std::string name, Matrix init);

    Parameter& operator[](ParamId id) { return params_.at(id.index); }
    const Parameter& operator[](ParamId id) const { return params_.at(id.index); }
    std::optional<ParamId> find(const std::string& name) const;
    ParamId id(const std::string& name) const;
    Matrix& value(const std::string& name) { return params_[id(name).index].value; }
    const Matrix& value(const std::string& name) const { return params_[id(name).index].value; }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    std::vector<ParamId> ids() const;
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();

    // {"tensors": [{"name", "rows", "cols", "values"}]}
    nlohmann::json to_json() const;
    static ParameterStore from_json(const nlohmann::json& doc);
    // Overwrites values of an existing store; names and shapes must match exactly.
    void load_values(const nlohmann::json& doc);

    friend bool operator==(const ParameterStore& a, const ParameterStore& b);

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

enum class OpKind {
    input,
    parameter,
    matmul,
    add,
    mul,
    activation,
    layer_norm,
    masked_softmax,
    concat_rows,
    concat_cols,
    mean_squared_error,
    scalar_scale,
    transpose,
    slice_rows,
    slice_cols,
    softmax_cross_entropy,
};

enum class Activation { relu, gelu, sigmoid, tanh };

const char* to_string(OpKind kind);
const char* to_string(Activation act);
Activation activation_from_string(const std::string& name);

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kMaskSentinel = -1e30;

// Shape or usage error raised while evaluating a graph.
class GraphError : public std::runtime_error {
public:
    GraphError(const std::string& what, std::vector<std::size_t> nodes)
        : std::runtime_error(what), nodes_(std::move(nodes)) {}
    const std::vector<std::size_t>& nodes() const { return nodes_; }

private:
    std::vector<std::size_t> nodes_;
};

double apply_activation(Activation act, double x);
double activation_derivative(Activation act, double x);

// Lower-triangular ones: row i may attend to columns 0..i.
Matrix causal_mask(std::size_t n);

// Static computational graph. Nodes are appended in topological order, so
// forward and backward walk the node list in index order.
class Graph {
public:
    explicit Graph(ParameterStore* params = nullptr) : params_(params) {}

    NodeId input(Matrix value);
    NodeId parameter(ParamId id);
    NodeId parameter(const std::string& name);
    NodeId matmul(NodeId a, NodeId b);
    // b may be a full matrix, a 1xC row broadcast over rows, or a 1x1 scalar.
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId activation(NodeId a, Activation act);
    // Per-row (x - mean) / sqrt(max(var, epsilon)) with no affine transform.
    NodeId layer_norm(NodeId a, double epsilon = kLayerNormEpsilon);
    // mask has the shape of a; 0 entries receive zero probability.
    NodeId masked_softmax(NodeId a, Matrix mask);
    NodeId concat_rows(std::vector<NodeId> parts);
    NodeId concat_cols(std::vector<NodeId> parts);
    // Mean over all entries of (a - target)^2; returns 1x1.
    NodeId mse(NodeId a, NodeId target);
    NodeId scale(NodeId a, double factor);
    NodeId transpose(NodeId a);
    NodeId slice_rows(NodeId a, std::size_t begin, std::size_t count);
    NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count);
    // Mean negative log-likelihood of integer labels, one per row; returns 1x1.
    NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);

    void set_input(NodeId id, Matrix value);

    const Matrix& forward(NodeId root);
    // Accumulates d(root)/d(param) into the parameter store's grad tables.
    void backward(NodeId root, bool retain_node_grads = false);

    const Matrix& value(NodeId id) const;
    const Matrix& grad(NodeId id) const;
    OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
    std::size_t size() const { return nodes_.size(); }
    ParameterStore* params() const { return params_; }

private:
    struct Node {
        OpKind kind = OpKind::input;
        std::vector<std::size_t> inputs;
        Matrix value;
        Matrix grad;
        ParamId param;
        Activation act = Activation::relu;
        double scalar = 0.0;
        std::size_t begin = 0;
        std::size_t count = 0;
        Matrix aux;  // mask, or cached per-row statistics
        std::vector<std::size_t> labels;
        bool requires_grad = false;
    };

    NodeId push(Node node);
    void check_node(NodeId id) const;
    void compute(std::size_t i);
    void propagate(std::size_t i);
    Matrix& grad_slot(std::size_t i);
    bool wants_grad(std::size_t i) const { return nodes_[i].requires_grad; }
    const Matrix& val(std::size_t i) const;
    [[noreturn]] void shape_error(std::size_t node, const std::string& detail) const;

    ParameterStore* params_;
    std::vector<Node> nodes_;
    std::map<std::size_t, std::size_t> param_nodes_;
    bool forwarded_ = false;
    std::size_t forwarded_count_ = 0;
};

struct TensorGradError {
    std::string name;
    std::size_t entries = 0;
    double max_relative_error = 0.0;
    double mean_relative_error = 0.0;
};

struct GradCheckReport {
    std::vector<TensorGradError> tensors;
    double max_relative_error() const;
};

inline constexpr double kGradCheckStep = 1e-5;
// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline constexpr double kGradCheckFloor = 1e-6;

double relative_error(double analytic, double numeric, double floor = kGradCheckFloor);

// Compares backward() against central differences for every entry of the
// selected parameters. Parameter values are restored afterwards.
GradCheckReport grad_check(Graph& graph, NodeId root, ParameterStore& params,
                           std::span<const ParamId> subset, double step = kGradCheckStep);

enum class OptimizerKind { sgd, adam };

struct Moments {
    Matrix first;
    Matrix second;
};

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::map<std::string, Moments> moments;
    long step = 0;
};

OptimizerState make_sgd(double learning_rate);
// Allocates zeroed moment tables for every tensor currently in the store.
OptimizerState make_adam(const ParameterStore& params, double learning_rate = 1e-3);

// Applies one update from the accumulated gradients, then zeroes them.
void optimizer_step(ParameterStore& params, OptimizerState& state);

}  // namespace lop::ad
