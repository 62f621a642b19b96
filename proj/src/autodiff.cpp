#include "lop/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace lop::ad {

// ---------------------------------------------------------------------------
// ParameterStore

ParamId ParameterStore::add(std::string name, Matrix init) {
    if (by_name_.count(name) != 0) {
        throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    if (!init.all_finite()) {
        throw std::invalid_argument("parameter '" + name + "' has non-finite values");
    }
    const std::size_t idx = params_.size();
    by_name_.emplace(name, idx);
    Matrix grad(init.rows(), init.cols());
    params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
    return ParamId{idx};
}

std::optional<ParamId> ParameterStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return ParamId{it->second};
}

ParamId ParameterStore::id(const std::string& name) const {
    auto found = find(name);
    if (!found) throw std::out_of_range("no parameter named '" + name + "'");
    return *found;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<ParamId> ParameterStore::ids() const {
    std::vector<ParamId> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back(ParamId{i});
    return out;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

nlohmann::json ParameterStore::to_json() const {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& p : params_) {
        tensors.push_back({{"name", p.name},
                           {"rows", p.value.rows()},
                           {"cols", p.value.cols()},
                           {"values", p.value.values()}});
    }
    return {{"tensors", std::move(tensors)}};
}

ParameterStore ParameterStore::from_json(const nlohmann::json& doc) {
    if (!doc.contains("tensors") || !doc.at("tensors").is_array()) {
        throw std::invalid_argument("tensor document: missing 'tensors' array");
    }
    ParameterStore store;
    for (const auto& t : doc.at("tensors")) {
        const auto rows = t.at("rows").get<std::size_t>();
        const auto cols = t.at("cols").get<std::size_t>();
        auto values = t.at("values").get<std::vector<double>>();
        store.add(t.at("name").get<std::string>(), Matrix(rows, cols, std::move(values)));
    }
    return store;
}

void ParameterStore::load_values(const nlohmann::json& doc) {
    ParameterStore loaded = from_json(doc);
    if (loaded.size() != size()) {
        throw std::invalid_argument("tensor document has " + std::to_string(loaded.size()) +
                                    " tensors, expected " + std::to_string(size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& dst = params_[i];
        auto& src = loaded.params_[i];
        if (dst.name != src.name || !dst.value.same_shape(src.value)) {
            throw std::invalid_argument("tensor '" + src.name + "' " + src.value.shape_string() +
                                        " does not match '" + dst.name + "' " +
                                        dst.value.shape_string());
        }
        dst.value = std::move(src.value);
    }
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
        if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value))
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Activations

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

double apply_activation(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::gelu: return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
        case Activation::sigmoid: return sigmoid(x);
        case Activation::tanh: return std::tanh(x);
    }
    return x;
}

double activation_derivative(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::gelu: {
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        }
        case Activation::sigmoid: {
            const double s = sigmoid(x);
            return s * (1.0 - s);
        }
        case Activation::tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

const char* to_string(OpKind kind) {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::parameter: return "parameter";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::activation: return "activation";
        case OpKind::layer_norm: return "layer-norm";
        case OpKind::masked_softmax: return "masked-softmax";
        case OpKind::concat_rows: return "concat-rows";
        case OpKind::concat_cols: return "concat-cols";
        case OpKind::mean_squared_error: return "mean-squared-error";
        case OpKind::scalar_scale: return "scalar-scale";
        case OpKind::transpose: return "transpose";
        case OpKind::slice_rows: return "slice-rows";
        case OpKind::slice_cols: return "slice-cols";
        case OpKind::softmax_cross_entropy: return "softmax-cross-entropy";
    }
    return "?";
}

const char* to_string(Activation act) {
    switch (act) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

Activation activation_from_string(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

Matrix causal_mask(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
    return m;
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::push(Node node) {
    node.requires_grad = node.kind == OpKind::parameter;
    for (std::size_t in : node.inputs) {
        if (in >= nodes_.size()) throw GraphError("graph: dangling input " + std::to_string(in), {in});
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    nodes_.push_back(std::move(node));
    forwarded_ = false;
    return NodeId{nodes_.size() - 1};
}

void Graph::check_node(NodeId id) const {
    if (id.index >= nodes_.size()) {
        throw GraphError("graph: unknown node " + std::to_string(id.index), {id.index});
    }
}

NodeId Graph::input(Matrix value) {
    Node n;
    n.kind = OpKind::input;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::parameter(ParamId id) {
    if (params_ == nullptr) throw GraphError("graph: parameter node without a parameter store", {});
    if (id.index >= params_->size()) throw GraphError("graph: unknown parameter", {});
    auto it = param_nodes_.find(id.index);
    if (it != param_nodes_.end()) return NodeId{it->second};
    Node n;
    n.kind = OpKind::parameter;
    n.param = id;
    NodeId nid = push(std::move(n));
    param_nodes_.emplace(id.index, nid.index);
    return nid;
}

NodeId Graph::parameter(const std::string& name) {
    if (params_ == nullptr) throw GraphError("graph: parameter node without a parameter store", {});
    return parameter(params_->id(name));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::matmul;
    n.inputs = {a.index, b.index};
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::add;
    n.inputs = {a.index, b.index};
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::mul;
    n.inputs = {a.index, b.index};
    return push(std::move(n));
}

NodeId Graph::activation(NodeId a, Activation act) {
    Node n;
    n.kind = OpKind::activation;
    n.inputs = {a.index};
    n.act = act;
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId a, double epsilon) {
    Node n;
    n.kind = OpKind::layer_norm;
    n.inputs = {a.index};
    n.scalar = epsilon;
    return push(std::move(n));
}

NodeId Graph::masked_softmax(NodeId a, Matrix mask) {
    Node n;
    n.kind = OpKind::masked_softmax;
    n.inputs = {a.index};
    n.aux = std::move(mask);
    return push(std::move(n));
}

NodeId Graph::concat_rows(std::vector<NodeId> parts) {
    if (parts.empty()) throw GraphError("concat-rows: no inputs", {});
    Node n;
    n.kind = OpKind::concat_rows;
    for (auto p : parts) n.inputs.push_back(p.index);
    return push(std::move(n));
}

NodeId Graph::concat_cols(std::vector<NodeId> parts) {
    if (parts.empty()) throw GraphError("concat-cols: no inputs", {});
    Node n;
    n.kind = OpKind::concat_cols;
    for (auto p : parts) n.inputs.push_back(p.index);
    return push(std::move(n));
}

NodeId Graph::mse(NodeId a, NodeId target) {
    Node n;
    n.kind = OpKind::mean_squared_error;
    n.inputs = {a.index, target.index};
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
    Node n;
    n.kind = OpKind::scalar_scale;
    n.inputs = {a.index};
    n.scalar = factor;
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    Node n;
    n.kind = OpKind::transpose;
    n.inputs = {a.index};
    return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, std::size_t begin, std::size_t count) {
    Node n;
    n.kind = OpKind::slice_rows;
    n.inputs = {a.index};
    n.begin = begin;
    n.count = count;
    return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, std::size_t begin, std::size_t count) {
    Node n;
    n.kind = OpKind::slice_cols;
    n.inputs = {a.index};
    n.begin = begin;
    n.count = count;
    return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
    Node n;
    n.kind = OpKind::softmax_cross_entropy;
    n.inputs = {logits.index};
    n.labels = std::move(labels);
    return push(std::move(n));
}

void Graph::set_input(NodeId id, Matrix value) {
    check_node(id);
    auto& n = nodes_[id.index];
    if (n.kind != OpKind::input) {
        throw GraphError("set_input: node " + std::to_string(id.index) + " is " + to_string(n.kind),
                         {id.index});
    }
    n.value = std::move(value);
    forwarded_ = false;
}

const Matrix& Graph::val(std::size_t i) const {
    const auto& n = nodes_[i];
    if (n.kind == OpKind::parameter) return (*params_)[n.param].value;
    return n.value;
}

const Matrix& Graph::value(NodeId id) const {
    check_node(id);
    return val(id.index);
}

const Matrix& Graph::grad(NodeId id) const {
    check_node(id);
    return nodes_[id.index].grad;
}

void Graph::shape_error(std::size_t node, const std::string& detail) const {
    const auto& n = nodes_[node];
    std::ostringstream msg;
    msg << to_string(n.kind) << " node " << node << ": " << detail << " (inputs:";
    for (std::size_t in : n.inputs) msg << " node " << in << " " << val(in).shape_string();
    msg << ")";
    std::vector<std::size_t> ids{node};
    ids.insert(ids.end(), n.inputs.begin(), n.inputs.end());
    throw GraphError(msg.str(), std::move(ids));
}

// ---------------------------------------------------------------------------
// Forward

namespace {

enum class Broadcast { full, row, scalar };

std::optional<Broadcast> broadcast_kind(const Matrix& a, const Matrix& b) {
    if (a.same_shape(b)) return Broadcast::full;
    if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    return std::nullopt;
}

double broadcast_at(const Matrix& b, Broadcast kind, std::size_t r, std::size_t c) {
    switch (kind) {
        case Broadcast::full: return b(r, c);
        case Broadcast::row: return b(0, c);
        case Broadcast::scalar: return b(0, 0);
    }
    return 0.0;
}

void accumulate(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

void Graph::compute(std::size_t i) {
    auto& n = nodes_[i];
    switch (n.kind) {
        case OpKind::input:
            if (n.value.empty()) shape_error(i, "input has no value");
            return;
        case OpKind::parameter: return;
        case OpKind::matmul: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& b = val(n.inputs[1]);
            if (a.cols() != b.rows()) {
                shape_error(i, "inner dimensions " + a.shape_string() + " * " + b.shape_string());
            }
            matmul_into(a, b, n.value);
            return;
        }
        case OpKind::add:
        case OpKind::mul: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& b = val(n.inputs[1]);
            auto bk = broadcast_kind(a, b);
            if (!bk) shape_error(i, "cannot broadcast " + b.shape_string() + " onto " + a.shape_string());
            n.value = Matrix(a.rows(), a.cols());
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) {
                    const double bv = broadcast_at(b, *bk, r, c);
                    n.value(r, c) = n.kind == OpKind::add ? a(r, c) + bv : a(r, c) * bv;
                }
            return;
        }
        case OpKind::activation: {
            const Matrix& a = val(n.inputs[0]);
            n.value = Matrix(a.rows(), a.cols());
            for (std::size_t k = 0; k < a.size(); ++k) n.value[k] = apply_activation(n.act, a[k]);
            return;
        }
        case OpKind::layer_norm: {
            const Matrix& a = val(n.inputs[0]);
            const std::size_t cols = a.cols();
            n.value = Matrix(a.rows(), cols);
            n.aux = Matrix(a.rows(), 2);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                double mean = 0.0;
                for (std::size_t c = 0; c < cols; ++c) mean += a(r, c);
                mean /= static_cast<double>(cols);
                double var = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double d = a(r, c) - mean;
                    var += d * d;
                }
                var /= static_cast<double>(cols);
                // Variance is floored at epsilon, so rows above the floor normalize exactly.
                const bool clamped = var < n.scalar;
                const double inv = 1.0 / std::sqrt(clamped ? n.scalar : var);
                n.aux(r, 0) = inv;
                n.aux(r, 1) = clamped ? 1.0 : 0.0;
                for (std::size_t c = 0; c < cols; ++c) n.value(r, c) = (a(r, c) - mean) * inv;
            }
            return;
        }
        case OpKind::masked_softmax: {
            const Matrix& a = val(n.inputs[0]);
            if (!n.aux.same_shape(a)) {
                shape_error(i, "mask " + n.aux.shape_string() + " does not match " + a.shape_string());
            }
            n.value = Matrix(a.rows(), a.cols());
            std::vector<double> z(a.cols());
            for (std::size_t r = 0; r < a.rows(); ++r) {
                bool any = false;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < a.cols(); ++c) {
                    const bool keep = n.aux(r, c) != 0.0;
                    any = any || keep;
                    z[c] = a(r, c) + (keep ? 0.0 : kMaskSentinel);
                    mx = std::max(mx, z[c]);
                }
                if (!any) shape_error(i, "row " + std::to_string(r) + " is fully masked");
                double sum = 0.0;
                for (std::size_t c = 0; c < a.cols(); ++c) {
                    z[c] = std::exp(z[c] - mx);
                    sum += z[c];
                }
                for (std::size_t c = 0; c < a.cols(); ++c) n.value(r, c) = z[c] / sum;
            }
            return;
        }
        case OpKind::concat_rows: {
            const std::size_t cols = val(n.inputs[0]).cols();
            std::size_t rows = 0;
            for (std::size_t in : n.inputs) {
                if (val(in).cols() != cols) shape_error(i, "column counts differ");
                rows += val(in).rows();
            }
            n.value = Matrix(rows, cols);
            std::size_t r0 = 0;
            for (std::size_t in : n.inputs) {
                const Matrix& p = val(in);
                std::copy(p.values().begin(), p.values().end(), n.value.values().begin() + r0 * cols);
                r0 += p.rows();
            }
            return;
        }
        case OpKind::concat_cols: {
            const std::size_t rows = val(n.inputs[0]).rows();
            std::size_t cols = 0;
            for (std::size_t in : n.inputs) {
                if (val(in).rows() != rows) shape_error(i, "row counts differ");
                cols += val(in).cols();
            }
            n.value = Matrix(rows, cols);
            std::size_t c0 = 0;
            for (std::size_t in : n.inputs) {
                const Matrix& p = val(in);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < p.cols(); ++c) n.value(r, c0 + c) = p(r, c);
                c0 += p.cols();
            }
            return;
        }
        case OpKind::mean_squared_error: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& t = val(n.inputs[1]);
            if (!a.same_shape(t)) shape_error(i, "prediction and target shapes differ");
            if (a.empty()) shape_error(i, "empty operands");
            double s = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const double d = a[k] - t[k];
                s += d * d;
            }
            n.value = Matrix::scalar(s / static_cast<double>(a.size()));
            return;
        }
        case OpKind::scalar_scale: {
            const Matrix& a = val(n.inputs[0]);
            n.value = Matrix(a.rows(), a.cols());
            for (std::size_t k = 0; k < a.size(); ++k) n.value[k] = a[k] * n.scalar;
            return;
        }
        case OpKind::transpose: n.value = lop::transpose(val(n.inputs[0])); return;
        case OpKind::slice_rows: {
            const Matrix& a = val(n.inputs[0]);
            if (n.count == 0 || n.begin + n.count > a.rows()) {
                shape_error(i, "row slice [" + std::to_string(n.begin) + ", " +
                                   std::to_string(n.begin + n.count) + ") out of range");
            }
            n.value = Matrix(n.count, a.cols());
            std::copy(a.values().begin() + n.begin * a.cols(),
                      a.values().begin() + (n.begin + n.count) * a.cols(), n.value.values().begin());
            return;
        }
        case OpKind::slice_cols: {
            const Matrix& a = val(n.inputs[0]);
            if (n.count == 0 || n.begin + n.count > a.cols()) {
                shape_error(i, "column slice [" + std::to_string(n.begin) + ", " +
                                   std::to_string(n.begin + n.count) + ") out of range");
            }
            n.value = Matrix(a.rows(), n.count);
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < n.count; ++c) n.value(r, c) = a(r, n.begin + c);
            return;
        }
        case OpKind::softmax_cross_entropy: {
            const Matrix& a = val(n.inputs[0]);
            if (n.labels.size() != a.rows()) shape_error(i, "label count differs from row count");
            n.aux = Matrix(a.rows(), a.cols());
            double loss = 0.0;
            for (std::size_t r = 0; r < a.rows(); ++r) {
                if (n.labels[r] >= a.cols()) shape_error(i, "label out of range");
                double mx = a(r, 0);
                for (std::size_t c = 1; c < a.cols(); ++c) mx = std::max(mx, a(r, c));
                double sum = 0.0;
                for (std::size_t c = 0; c < a.cols(); ++c) sum += std::exp(a(r, c) - mx);
                const double lse = mx + std::log(sum);
                for (std::size_t c = 0; c < a.cols(); ++c) n.aux(r, c) = std::exp(a(r, c) - lse);
                loss += lse - a(r, n.labels[r]);
            }
            n.value = Matrix::scalar(loss / static_cast<double>(a.rows()));
            return;
        }
    }
}

const Matrix& Graph::forward(NodeId root) {
    check_node(root);
    for (std::size_t i = 0; i <= root.index; ++i) compute(i);
    forwarded_ = true;
    forwarded_count_ = root.index + 1;
    const Matrix& out = val(root.index);
    if (!out.all_finite()) {
        throw GraphError("forward: node " + std::to_string(root.index) + " produced non-finite values",
                         {root.index});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward

Matrix& Graph::grad_slot(std::size_t i) {
    auto& n = nodes_[i];
    if (n.grad.empty()) {
        const Matrix& v = val(i);
        n.grad = Matrix(v.rows(), v.cols());
    }
    return n.grad;
}

void Graph::propagate(std::size_t i) {
    auto& n = nodes_[i];
    const Matrix& g = n.grad;
    if (n.inputs.size() == 1 && !wants_grad(n.inputs[0])) return;
    switch (n.kind) {
        case OpKind::input:
        case OpKind::parameter: return;
        case OpKind::matmul: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& b = val(n.inputs[1]);
            const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
            if (wants_grad(n.inputs[0])) {
                Matrix& da = grad_slot(n.inputs[0]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t p = 0; p < inner; ++p) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) s += g(r, c) * b(p, c);
                        da(r, p) += s;
                    }
            }
            if (wants_grad(n.inputs[1])) {
                Matrix& db = grad_slot(n.inputs[1]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t p = 0; p < inner; ++p) {
                        const double av = a(r, p);
                        if (av == 0.0) continue;
                        for (std::size_t c = 0; c < cols; ++c) db(p, c) += av * g(r, c);
                    }
            }
            return;
        }
        case OpKind::add:
        case OpKind::mul: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& b = val(n.inputs[1]);
            const Broadcast bk = *broadcast_kind(a, b);
            const bool is_add = n.kind == OpKind::add;
            if (wants_grad(n.inputs[0])) {
                Matrix& da = grad_slot(n.inputs[0]);
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t c = 0; c < a.cols(); ++c)
                        da(r, c) += is_add ? g(r, c) : g(r, c) * broadcast_at(b, bk, r, c);
            }
            if (!wants_grad(n.inputs[1])) return;
            Matrix& db = grad_slot(n.inputs[1]);
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) {
                    const double contrib = is_add ? g(r, c) : g(r, c) * a(r, c);
                    switch (bk) {
                        case Broadcast::full: db(r, c) += contrib; break;
                        case Broadcast::row: db(0, c) += contrib; break;
                        case Broadcast::scalar: db(0, 0) += contrib; break;
                    }
                }
            return;
        }
        case OpKind::activation: {
            const Matrix& a = val(n.inputs[0]);
            Matrix& da = grad_slot(n.inputs[0]);
            for (std::size_t k = 0; k < a.size(); ++k) da[k] += g[k] * activation_derivative(n.act, a[k]);
            return;
        }
        case OpKind::layer_norm: {
            const Matrix& y = n.value;
            Matrix& da = grad_slot(n.inputs[0]);
            const std::size_t cols = y.cols();
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double mean_g = 0.0, mean_gy = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    mean_g += g(r, c);
                    mean_gy += g(r, c) * y(r, c);
                }
                mean_g /= static_cast<double>(cols);
                mean_gy /= static_cast<double>(cols);
                const double inv = n.aux(r, 0);
                if (n.aux(r, 1) != 0.0) mean_gy = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    da(r, c) += inv * (g(r, c) - mean_g - y(r, c) * mean_gy);
            }
            return;
        }
        case OpKind::masked_softmax: {
            const Matrix& y = n.value;
            Matrix& da = grad_slot(n.inputs[0]);
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) da(r, c) += y(r, c) * (g(r, c) - dot);
            }
            return;
        }
        case OpKind::concat_rows: {
            std::size_t r0 = 0;
            for (std::size_t in : n.inputs) {
                const std::size_t part_rows = val(in).rows();
                if (wants_grad(in)) {
                    Matrix& dp = grad_slot(in);
                    for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += g[r0 * g.cols() + k];
                }
                r0 += part_rows;
            }
            return;
        }
        case OpKind::concat_cols: {
            std::size_t c0 = 0;
            for (std::size_t in : n.inputs) {
                const std::size_t part_cols = val(in).cols();
                if (wants_grad(in)) {
                    Matrix& dp = grad_slot(in);
                    for (std::size_t r = 0; r < dp.rows(); ++r)
                        for (std::size_t c = 0; c < part_cols; ++c) dp(r, c) += g(r, c0 + c);
                }
                c0 += part_cols;
            }
            return;
        }
        case OpKind::mean_squared_error: {
            const Matrix& a = val(n.inputs[0]);
            const Matrix& t = val(n.inputs[1]);
            const double k = 2.0 * g(0, 0) / static_cast<double>(a.size());
            const bool ga = wants_grad(n.inputs[0]), gt = wants_grad(n.inputs[1]);
            for (std::size_t j = 0; j < a.size(); ++j) {
                const double d = k * (a[j] - t[j]);
                if (ga) grad_slot(n.inputs[0])[j] += d;
                if (gt) grad_slot(n.inputs[1])[j] -= d;
            }
            return;
        }
        case OpKind::scalar_scale: {
            Matrix& da = grad_slot(n.inputs[0]);
            for (std::size_t k = 0; k < g.size(); ++k) da[k] += n.scalar * g[k];
            return;
        }
        case OpKind::transpose: {
            Matrix& da = grad_slot(n.inputs[0]);
            for (std::size_t r = 0; r < da.rows(); ++r)
                for (std::size_t c = 0; c < da.cols(); ++c) da(r, c) += g(c, r);
            return;
        }
        case OpKind::slice_rows: {
            Matrix& da = grad_slot(n.inputs[0]);
            const std::size_t off = n.begin * da.cols();
            for (std::size_t k = 0; k < g.size(); ++k) da[off + k] += g[k];
            return;
        }
        case OpKind::slice_cols: {
            Matrix& da = grad_slot(n.inputs[0]);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) da(r, n.begin + c) += g(r, c);
            return;
        }
        case OpKind::softmax_cross_entropy: {
            Matrix& da = grad_slot(n.inputs[0]);
            const double k = g(0, 0) / static_cast<double>(da.rows());
            for (std::size_t r = 0; r < da.rows(); ++r)
                for (std::size_t c = 0; c < da.cols(); ++c)
                    da(r, c) += k * (n.aux(r, c) - (c == n.labels[r] ? 1.0 : 0.0));
            return;
        }
    }
}

void Graph::backward(NodeId root, bool retain_node_grads) {
    check_node(root);
    if (!forwarded_ || root.index >= forwarded_count_) {
        throw GraphError("backward: node " + std::to_string(root.index) + " has not been forwarded",
                         {root.index});
    }
    const Matrix& out = val(root.index);
    if (out.rows() != 1 || out.cols() != 1) {
        throw GraphError("backward: root node " + std::to_string(root.index) + " is " +
                             out.shape_string() + ", expected a 1x1 scalar",
                         {root.index});
    }
    for (std::size_t i = 0; i <= root.index; ++i) nodes_[i].grad = Matrix();
    grad_slot(root.index)(0, 0) = 1.0;
    for (std::size_t i = root.index + 1; i-- > 0;) {
        if (nodes_[i].grad.empty() || !nodes_[i].requires_grad) continue;
        propagate(i);
    }
    for (std::size_t i = 0; i <= root.index; ++i) {
        auto& n = nodes_[i];
        if (n.kind == OpKind::parameter && !n.grad.empty()) accumulate((*params_)[n.param].grad, n.grad);
        if (!retain_node_grads) n.grad = Matrix();
    }
}

// ---------------------------------------------------------------------------
// Gradient check

double GradCheckReport::max_relative_error() const {
    double m = 0.0;
    for (const auto& t : tensors) m = std::max(m, t.max_relative_error);
    return m;
}

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(Graph& graph, NodeId root, ParameterStore& params,
                           std::span<const ParamId> subset, double step) {
    params.zero_grad();
    graph.forward(root);
    graph.backward(root);

    GradCheckReport report;
    for (ParamId id : subset) {
        Parameter& p = params[id];
        const Matrix analytic = p.grad;
        TensorGradError err;
        err.name = p.name;
        err.entries = p.value.size();
        double total = 0.0;
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double orig = p.value[k];
            p.value[k] = orig + step;
            const double up = graph.forward(root)(0, 0);
            p.value[k] = orig - step;
            const double down = graph.forward(root)(0, 0);
            p.value[k] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double rel = relative_error(analytic[k], numeric);
            err.max_relative_error = std::max(err.max_relative_error, rel);
            total += rel;
        }
        err.mean_relative_error = err.entries == 0 ? 0.0 : total / static_cast<double>(err.entries);
        report.tensors.push_back(std::move(err));
    }
    params.zero_grad();
    graph.forward(root);
    return report;
}

// ---------------------------------------------------------------------------
// Optimizers

OptimizerState make_sgd(double learning_rate) {
    OptimizerState s;
    s.kind = OptimizerKind::sgd;
    s.learning_rate = learning_rate;
    return s;
}

OptimizerState make_adam(const ParameterStore& params, double learning_rate) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = learning_rate;
    for (const auto& p : params) {
        s.moments.emplace(p.name, Moments{Matrix(p.value.rows(), p.value.cols()),
                                          Matrix(p.value.rows(), p.value.cols())});
    }
    return s;
}

void optimizer_step(ParameterStore& params, OptimizerState& state) {
    ++state.step;
    if (state.kind == OptimizerKind::sgd) {
        for (auto& p : params) {
            for (std::size_t k = 0; k < p.value.size(); ++k) p.value[k] -= state.learning_rate * p.grad[k];
            p.grad.fill(0.0);
        }
        return;
    }
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (auto& p : params) {
        auto it = state.moments.find(p.name);
        if (it == state.moments.end() || !it->second.first.same_shape(p.value)) {
            throw std::logic_error("adam: no moment table for parameter '" + p.name + "'");
        }
        Matrix& m = it->second.first;
        Matrix& v = it->second.second;
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double gk = p.grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            p.value[k] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
        p.grad.fill(0.0);
    }
}

}  // namespace lop::ad
