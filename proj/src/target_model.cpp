#include "lop/target_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "lop/random.hpp"

namespace lop::model {

// ---------------------------------------------------------------------------
// Spec

TargetModelSpec TargetModelSpec::uniform(std::size_t layers, std::size_t width, std::size_t input_dim,
                                         std::size_t num_classes, bool residual,
                                         ad::Activation activation) {
    TargetModelSpec s;
    s.num_layers = layers;
    s.hidden_widths.assign(layers, width);
    s.input_dim = input_dim;
    s.num_classes = num_classes;
    s.residual = residual;
    s.activation = activation;
    return s;
}

void TargetModelSpec::validate() const {
    if (num_layers < 1) throw std::invalid_argument("model spec: num_layers must be >= 1");
    if (hidden_widths.size() != num_layers) {
        throw std::invalid_argument("model spec: " + std::to_string(hidden_widths.size()) +
                                    " hidden widths for " + std::to_string(num_layers) + " layers");
    }
    for (std::size_t w : hidden_widths) {
        if (w < 2) throw std::invalid_argument("model spec: hidden widths must be >= 2");
    }
    if (input_dim < 1) throw std::invalid_argument("model spec: input_dim must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("model spec: num_classes must be >= 1");
    if (activation != ad::Activation::relu && activation != ad::Activation::gelu) {
        throw std::invalid_argument("model spec: activation must be relu or gelu");
    }
}

std::size_t TargetModelSpec::total_hidden() const {
    std::size_t n = 0;
    for (std::size_t w : hidden_widths) n += w;
    return n;
}

nlohmann::json TargetModelSpec::to_json() const {
    return {{"num_layers", num_layers},   {"hidden_widths", hidden_widths},
            {"input_dim", input_dim},     {"num_classes", num_classes},
            {"activation", ad::to_string(activation)}, {"residual", residual}};
}

TargetModelSpec TargetModelSpec::from_json(const nlohmann::json& doc) {
    TargetModelSpec s;
    s.num_layers = doc.at("num_layers").get<std::size_t>();
    s.hidden_widths = doc.at("hidden_widths").get<std::vector<std::size_t>>();
    s.input_dim = doc.at("input_dim").get<std::size_t>();
    s.num_classes = doc.at("num_classes").get<std::size_t>();
    s.activation = ad::activation_from_string(doc.at("activation").get<std::string>());
    s.residual = doc.at("residual").get<bool>();
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Masks and data

MaskSet MaskSet::all_ones(std::span<const std::size_t> widths) {
    MaskSet m;
    for (std::size_t w : widths) m.keep.emplace_back(w, std::uint8_t{1});
    return m;
}

MaskSet MaskSet::all_zeros(std::span<const std::size_t> widths) {
    MaskSet m;
    for (std::size_t w : widths) m.keep.emplace_back(w, std::uint8_t{0});
    return m;
}

std::size_t MaskSet::kept(std::size_t layer) const {
    const auto& k = keep.at(layer);
    return static_cast<std::size_t>(std::count(k.begin(), k.end(), std::uint8_t{1}));
}

std::size_t keep_count(double theta, std::size_t width) {
    // The slack absorbs representation error in decimal ratios such as 0.9, whose
    // double value sits just above the decimal.
    const double raw = std::floor((1.0 - theta) * static_cast<double>(width) + 1e-9);
    if (raw <= 0.0) return 0;
    return std::min(width, static_cast<std::size_t>(raw));
}

void CalibrationSet::validate(std::size_t input_dim, std::size_t num_classes) const {
    if (inputs.size() != labels.size()) {
        throw std::invalid_argument("calibration set: " + std::to_string(inputs.size()) + " inputs but " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (const auto& x : inputs) {
        if (x.size() != input_dim) {
            throw std::invalid_argument("calibration set: input of length " + std::to_string(x.size()) +
                                        ", expected " + std::to_string(input_dim));
        }
    }
    for (std::size_t y : labels) {
        if (y >= num_classes) throw std::invalid_argument("calibration set: label out of range");
    }
}

CalibrationSet CalibrationSet::subset(std::span<const std::size_t> indices) const {
    CalibrationSet out;
    for (std::size_t i : indices) {
        out.inputs.push_back(inputs.at(i));
        out.labels.push_back(labels.at(i));
    }
    return out;
}

nlohmann::json CalibrationSet::to_json() const {
    return {{"inputs", inputs}, {"labels", labels}};
}

CalibrationSet CalibrationSet::from_json(const nlohmann::json& doc) {
    CalibrationSet s;
    s.inputs = doc.at("inputs").get<std::vector<std::vector<double>>>();
    s.labels = doc.at("labels").get<std::vector<std::size_t>>();
    if (s.inputs.size() != s.labels.size()) {
        throw std::invalid_argument("calibration set: inputs and labels differ in length");
    }
    return s;
}

CalibrationSet make_blobs(const BlobsConfig& config, std::size_t count, std::uint64_t seed) {
    if (config.num_classes > config.dim) {
        throw std::invalid_argument("blobs: need dim >= num_classes for orthogonal class means");
    }
    Rng rng(seed);
    CalibrationSet set;
    set.inputs.reserve(count);
    set.labels.reserve(count);
    const double offset = config.separation * config.sigma;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = rng.index(config.num_classes);
        std::vector<double> x(config.dim);
        for (std::size_t k = 0; k < config.dim; ++k) x[k] = config.sigma * rng.normal();
        x[label] += offset;
        set.inputs.push_back(std::move(x));
        set.labels.push_back(label);
    }
    return set;
}

// ---------------------------------------------------------------------------
// Model

std::string TargetModel::param_name(std::size_t layer, const char* tensor) {
    return "ffn" + std::to_string(layer) + "." + tensor;
}

TargetModel::TargetModel(TargetModelSpec spec, ad::ParameterStore params)
    : spec_(std::move(spec)), params_(std::move(params)) {
    const std::size_t dm = spec_.input_dim;
    auto expect = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        const Matrix& m = params_.value(name);
        if (m.rows() != rows || m.cols() != cols) {
            throw std::invalid_argument("model: tensor '" + name + "' is " + m.shape_string() +
                                        ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
        }
    };
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
        const std::size_t d = spec_.hidden_widths.at(l);
        expect(param_name(l, "w1"), d, dm);
        expect(param_name(l, "b1"), 1, d);
        expect(param_name(l, "w2"), dm, d);
        expect(param_name(l, "b2"), 1, dm);
    }
    expect("head.w", spec_.num_classes, dm);
    expect("head.b", 1, spec_.num_classes);
}

const Matrix& TargetModel::w1(std::size_t l) const { return params_.value(param_name(l, "w1")); }
const Matrix& TargetModel::b1(std::size_t l) const { return params_.value(param_name(l, "b1")); }
const Matrix& TargetModel::w2(std::size_t l) const { return params_.value(param_name(l, "w2")); }
const Matrix& TargetModel::b2(std::size_t l) const { return params_.value(param_name(l, "b2")); }
const Matrix& TargetModel::head_w() const { return params_.value("head.w"); }
const Matrix& TargetModel::head_b() const { return params_.value("head.b"); }

TargetModel build_model(const TargetModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    auto glorot = [&](std::size_t rows, std::size_t cols) {
        const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
        Matrix m(rows, cols);
        for (auto& v : m.values()) v = rng.uniform(-a, a);
        return m;
    };
    ad::ParameterStore ps;
    const std::size_t dm = spec.input_dim;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const std::size_t d = spec.hidden_widths[l];
        ps.add(TargetModel::param_name(l, "w1"), glorot(d, dm));
        ps.add(TargetModel::param_name(l, "b1"), Matrix(1, d));
        ps.add(TargetModel::param_name(l, "w2"), glorot(dm, d));
        ps.add(TargetModel::param_name(l, "b2"), Matrix(1, dm));
    }
    ps.add("head.w", glorot(spec.num_classes, dm));
    ps.add("head.b", Matrix(1, spec.num_classes));
    return TargetModel(spec, std::move(ps));
}

namespace {

// One FFN block on a single sample. `keep` is null for a dense block.
// Accumulation order is identical for dense, masked, and shrunken evaluation:
// pre_j = (sum_k W1[j,k] x_k) + b1_j and y_i = (sum_j W2[i,j] h_j) + b2_i.
void block_forward(const Matrix& w1, const Matrix& b1, const Matrix& w2, const Matrix& b2,
                   const std::uint8_t* keep, ad::Activation act, bool residual, std::vector<double>& x,
                   std::vector<double>& hidden, std::vector<double>& y) {
    const std::size_t d = w1.rows();
    const std::size_t dm = x.size();
    if (d == 0) return;
    if (keep != nullptr && std::none_of(keep, keep + d, [](std::uint8_t k) { return k != 0; })) return;
    hidden.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        if (keep != nullptr && keep[j] == 0) {
            hidden[j] = 0.0;
            continue;
        }
        const double* row = w1.data() + j * dm;
        double s = 0.0;
        for (std::size_t k = 0; k < dm; ++k) s += row[k] * x[k];
        s += b1[j];
        hidden[j] = ad::apply_activation(act, s);
    }
    y.resize(dm);
    for (std::size_t i = 0; i < dm; ++i) {
        const double* row = w2.data() + i * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += row[j] * hidden[j];
        s += b2[i];
        y[i] = s;
    }
    if (residual) {
        for (std::size_t i = 0; i < dm; ++i) x[i] += y[i];
    } else {
        x.swap(y);
    }
}

void head_forward(const Matrix& hw, const Matrix& hb, const std::vector<double>& x, std::span<double> out) {
    const std::size_t classes = hw.rows(), dm = hw.cols();
    if (out.size() != classes) throw std::invalid_argument("logits: output span has wrong length");
    for (std::size_t c = 0; c < classes; ++c) {
        const double* row = hw.data() + c * dm;
        double s = 0.0;
        for (std::size_t k = 0; k < dm; ++k) s += row[k] * x[k];
        out[c] = s + hb[c];
    }
}

void check_input(std::span<const double> x, std::size_t dim) {
    if (x.size() != dim) {
        throw std::invalid_argument("forward: input of length " + std::to_string(x.size()) +
                                    ", expected " + std::to_string(dim));
    }
}

void check_masks(const TargetModel& model, const MaskSet& masks) {
    if (masks.layers() != model.layers()) {
        throw std::invalid_argument("masks: " + std::to_string(masks.layers()) + " layers, model has " +
                                    std::to_string(model.layers()));
    }
    for (std::size_t l = 0; l < model.layers(); ++l) {
        if (masks.keep[l].size() != model.width(l)) {
            throw std::invalid_argument("masks: layer " + std::to_string(l) + " mask has length " +
                                        std::to_string(masks.keep[l].size()) + ", width is " +
                                        std::to_string(model.width(l)));
        }
    }
}

}  // namespace

void TargetModel::logits(std::span<const double> x, std::span<double> out) const {
    check_input(x, spec_.input_dim);
    std::vector<double> stream(x.begin(), x.end()), hidden, y;
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
        block_forward(w1(l), b1(l), w2(l), b2(l), nullptr, spec_.activation, spec_.residual, stream, hidden, y);
    }
    head_forward(head_w(), head_b(), stream, out);
}

TargetModel TargetModel::shrink(const MaskSet& masks) const {
    check_masks(*this, masks);
    TargetModel out;
    out.spec_ = spec_;
    const std::size_t dm = spec_.input_dim;
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
        const auto& keep = masks.keep[l];
        std::vector<std::size_t> kept;
        for (std::size_t j = 0; j < keep.size(); ++j)
            if (keep[j] != 0) kept.push_back(j);
        const std::size_t k = kept.size();
        Matrix nw1(k, dm), nb1(1, k), nw2(dm, k);
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < dm; ++c) nw1(r, c) = w1(l)(kept[r], c);
            nb1(0, r) = b1(l)(0, kept[r]);
        }
        for (std::size_t i = 0; i < dm; ++i)
            for (std::size_t r = 0; r < k; ++r) nw2(i, r) = w2(l)(i, kept[r]);
        out.spec_.hidden_widths[l] = k;
        out.params_.add(param_name(l, "w1"), std::move(nw1));
        out.params_.add(param_name(l, "b1"), std::move(nb1));
        out.params_.add(param_name(l, "w2"), std::move(nw2));
        out.params_.add(param_name(l, "b2"), b2(l));
    }
    out.params_.add("head.w", head_w());
    out.params_.add("head.b", head_b());
    return out;
}

nlohmann::json TargetModel::to_json() const {
    nlohmann::json doc = params_.to_json();
    doc["spec"] = spec_.to_json();
    return doc;
}

TargetModel TargetModel::from_json(const nlohmann::json& doc) {
    if (!doc.contains("spec")) throw std::invalid_argument("model document: missing 'spec'");
    return TargetModel(TargetModelSpec::from_json(doc.at("spec")), ad::ParameterStore::from_json(doc));
}

std::string TargetModel::fingerprint() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(to_json().dump())));
    return buf;
}

MaskedModel::MaskedModel(const TargetModel& model, MaskSet masks) : model_(&model), masks_(std::move(masks)) {
    check_masks(model, masks_);
}

void MaskedModel::logits(std::span<const double> x, std::span<double> out) const {
    const auto& spec = model_->spec();
    check_input(x, spec.input_dim);
    std::vector<double> stream(x.begin(), x.end()), hidden, y;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        block_forward(model_->w1(l), model_->b1(l), model_->w2(l), model_->b2(l), masks_.keep[l].data(),
                      spec.activation, spec.residual, stream, hidden, y);
    }
    head_forward(model_->head_w(), model_->head_b(), stream, out);
}

MaskedModel apply_masks(const TargetModel& model, const MaskSet& masks) { return MaskedModel(model, masks); }

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

EvalResult evaluate_dense(const TargetModel& model, const CalibrationSet& eval_set) {
    if (eval_set.size() == 0) throw std::invalid_argument("evaluate: empty evaluation set");
    const auto& spec = model.spec();
    eval_set.validate(spec.input_dim, spec.num_classes);
    EvalResult r;
    r.correct_per_class.assign(spec.num_classes, 0);
    r.total_per_class.assign(spec.num_classes, 0);
    r.count = eval_set.size();

    // Layer tensors are looked up once instead of per sample.
    struct Block {
        const Matrix *w1, *b1, *w2, *b2;
    };
    std::vector<Block> blocks;
    for (std::size_t l = 0; l < spec.num_layers; ++l)
        blocks.push_back({&model.w1(l), &model.b1(l), &model.w2(l), &model.b2(l)});
    std::vector<double> stream, hidden, y, logits(spec.num_classes);
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
        stream.assign(eval_set.inputs[i].begin(), eval_set.inputs[i].end());
        for (const auto& b : blocks)
            block_forward(*b.w1, *b.b1, *b.w2, *b.b2, nullptr, spec.activation, spec.residual, stream, hidden, y);
        head_forward(model.head_w(), model.head_b(), stream, logits);
        const std::size_t label = eval_set.labels[i];
        ++r.total_per_class[label];
        if (argmax(logits) == label) {
            ++r.correct_per_class[label];
            ++r.correct;
        }
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
    return r;
}

EvalResult evaluate(const TargetModel& model, const MaskSet& masks, const CalibrationSet& eval_set) {
    return evaluate_dense(model.shrink(masks), eval_set);
}

std::vector<Matrix> collect_activations(const TargetModel& model, const CalibrationSet& calibration) {
    const auto& spec = model.spec();
    calibration.validate(spec.input_dim, spec.num_classes);
    std::vector<Matrix> traces;
    for (std::size_t l = 0; l < spec.num_layers; ++l) traces.emplace_back(calibration.size(), model.width(l));
    std::vector<double> stream, hidden, y;
    for (std::size_t i = 0; i < calibration.size(); ++i) {
        stream.assign(calibration.inputs[i].begin(), calibration.inputs[i].end());
        for (std::size_t l = 0; l < spec.num_layers; ++l) {
            block_forward(model.w1(l), model.b1(l), model.w2(l), model.b2(l), nullptr, spec.activation,
                          spec.residual, stream, hidden, y);
            std::copy(hidden.begin(), hidden.end(), traces[l].row_span(i).begin());
        }
    }
    return traces;
}

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult pretrain(TargetModel& model, const CalibrationSet& train_set, const PretrainConfig& config) {
    if (train_set.size() == 0) throw std::invalid_argument("pretrain: empty training set");
    if (config.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be positive");
    const auto& spec = model.spec();
    train_set.validate(spec.input_dim, spec.num_classes);

    auto& ps = model.params();
    ps.zero_grad();
    auto opt = ad::make_adam(ps, config.learning_rate);
    Rng rng(config.seed);
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PretrainResult result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            Matrix xb(n, spec.input_dim);
            std::vector<std::size_t> yb(n);
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t idx = order[start + r];
                std::copy(train_set.inputs[idx].begin(), train_set.inputs[idx].end(), xb.row_span(r).begin());
                yb[r] = train_set.labels[idx];
            }
            ad::Graph g(&ps);
            auto x = g.input(std::move(xb));
            for (std::size_t l = 0; l < spec.num_layers; ++l) {
                auto pre = g.add(g.matmul(x, g.transpose(g.parameter(TargetModel::param_name(l, "w1")))),
                                 g.parameter(TargetModel::param_name(l, "b1")));
                auto h = g.activation(pre, spec.activation);
                auto y = g.add(g.matmul(h, g.transpose(g.parameter(TargetModel::param_name(l, "w2")))),
                               g.parameter(TargetModel::param_name(l, "b2")));
                x = spec.residual ? g.add(x, y) : y;
            }
            auto logits = g.add(g.matmul(x, g.transpose(g.parameter("head.w"))), g.parameter("head.b"));
            auto loss = g.softmax_cross_entropy(logits, std::move(yb));
            double value;
            try {
                value = g.forward(loss)(0, 0);
            } catch (const ad::GraphError& e) {
                throw std::runtime_error("pretrain: loss diverged in epoch " + std::to_string(epoch) + ": " +
                                         e.what());
            }
            g.backward(loss);
            ad::optimizer_step(ps, opt);
            loss_sum += value;
            ++batches;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }
    result.train_accuracy = evaluate_dense(model, train_set).accuracy;
    return result;
}

}  // namespace lop::model
