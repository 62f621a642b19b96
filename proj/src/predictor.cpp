#include "lop/predictor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lop/random.hpp"

namespace lop::predictor {

using ad::Graph;
using ad::NodeId;

const char* to_string(Backbone backbone) {
    switch (backbone) {
        case Backbone::transformer_ar: return "transformer-ar";
        case Backbone::transformer_parallel: return "transformer-parallel";
        case Backbone::bilstm: return "bilstm";
        case Backbone::mlp: return "mlp";
    }
    return "?";
}

Backbone backbone_from_string(const std::string& name) {
    if (name == "transformer-ar") return Backbone::transformer_ar;
    if (name == "transformer-parallel") return Backbone::transformer_parallel;
    if (name == "bilstm") return Backbone::bilstm;
    if (name == "mlp") return Backbone::mlp;
    throw std::invalid_argument("unknown backbone '" + name + "'");
}

void PredictorConfig::validate() const {
    if (sequence_length == 0) throw std::invalid_argument("predictor config: sequence length must be >= 1");
    if (hidden == 0) throw std::invalid_argument("predictor config: hidden width must be >= 1");
    const bool transformer = backbone == Backbone::transformer_ar || backbone == Backbone::transformer_parallel;
    if (transformer) {
        if (encoder_layers == 0) throw std::invalid_argument("predictor config: encoder layers must be >= 1");
        if (heads == 0 || hidden % heads != 0) {
            throw std::invalid_argument("predictor config: hidden width " + std::to_string(hidden) +
                                        " is not divisible by " + std::to_string(heads) + " heads");
        }
        if (ff_multiplier == 0) throw std::invalid_argument("predictor config: ff multiplier must be >= 1");
    }
}

nlohmann::json PredictorConfig::to_json() const {
    return {{"backbone", to_string(backbone)},
            {"sequence_length", sequence_length},
            {"hidden", hidden},
            {"encoder_layers", encoder_layers},
            {"heads", heads},
            {"ff_multiplier", ff_multiplier},
            {"activation", ad::to_string(activation)}};
}

PredictorConfig PredictorConfig::from_json(const nlohmann::json& doc) {
    PredictorConfig c;
    c.backbone = backbone_from_string(doc.at("backbone").get<std::string>());
    c.sequence_length = doc.at("sequence_length").get<std::size_t>();
    c.hidden = doc.at("hidden").get<std::size_t>();
    c.encoder_layers = doc.at("encoder_layers").get<std::size_t>();
    c.heads = doc.at("heads").get<std::size_t>();
    c.ff_multiplier = doc.at("ff_multiplier").get<std::size_t>();
    c.activation = ad::activation_from_string(doc.at("activation").get<std::string>());
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("train config: batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw std::invalid_argument("train config: learning rate must be finite and >= 0");
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::string enc_name(std::size_t k, const char* tensor) { return "enc" + std::to_string(k) + "." + tensor; }

// Shapes of every tensor a configuration needs, in a fixed order.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> layout(const PredictorConfig& c) {
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    const std::size_t d = c.hidden, L = c.sequence_length;
    auto put = [&](std::string name, std::size_t r, std::size_t k) { out.push_back({std::move(name), {r, k}}); };
    switch (c.backbone) {
        case Backbone::transformer_ar:
        case Backbone::transformer_parallel: {
            put("embed.w1", 1, d);
            put("embed.b1", 1, d);
            put("embed.w2", d, d);
            put("embed.b2", 1, d);
            if (c.backbone == Backbone::transformer_ar) {
                if (L > 1) put("layer_emb", L - 1, d);
            } else {
                put("pos_emb", L, d);
            }
            const std::size_t f = c.ff_multiplier * d;
            for (std::size_t k = 0; k < c.encoder_layers; ++k) {
                for (const char* w : {"wq", "wk", "wv", "wo"}) put(enc_name(k, w), d, d);
                for (const char* b : {"bq", "bk", "bv", "bo"}) put(enc_name(k, b), 1, d);
                put(enc_name(k, "ln1.g"), 1, d);
                put(enc_name(k, "ln1.b"), 1, d);
                put(enc_name(k, "ff.w1"), d, f);
                put(enc_name(k, "ff.b1"), 1, f);
                put(enc_name(k, "ff.w2"), f, d);
                put(enc_name(k, "ff.b2"), 1, d);
                put(enc_name(k, "ln2.g"), 1, d);
                put(enc_name(k, "ln2.b"), 1, d);
            }
            put("out.w", d, 1);
            put("out.b", 1, 1);
            break;
        }
        case Backbone::bilstm:
            put("proj.w", 1, d);
            put("proj.b", 1, d);
            for (const char* dir : {"fwd", "bwd"}) {
                const std::string p = std::string("lstm.") + dir + ".";
                put(p + "wx", d, 4 * d);
                put(p + "wh", d, 4 * d);
                put(p + "b", 1, 4 * d);
            }
            put("out.w", 2 * d, 1);
            put("out.b", 1, 1);
            break;
        case Backbone::mlp:
            put("mlp.w1", 1, d);
            put("mlp.b1", 1, d);
            put("mlp.w2", d, d);
            put("mlp.b2", 1, d);
            put("mlp.w3", d, L);
            put("mlp.b3", 1, L);
            break;
    }
    return out;
}

}  // namespace

Predictor::Predictor(PredictorConfig config, ad::ParameterStore params)
    : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const auto expected = layout(config_);
    if (params_.size() != expected.size()) {
        throw std::invalid_argument("predictor: expected " + std::to_string(expected.size()) + " tensors, got " +
                                    std::to_string(params_.size()));
    }
    for (const auto& [name, shape] : expected) {
        const auto id = params_.find(name);
        if (!id) throw std::invalid_argument("predictor: missing tensor '" + name + "'");
        const Matrix& v = params_[*id].value;
        if (v.rows() != shape.first || v.cols() != shape.second) {
            throw std::invalid_argument("predictor: tensor '" + name + "' is " + v.shape_string() + ", expected " +
                                        std::to_string(shape.first) + "x" + std::to_string(shape.second));
        }
    }
}

nlohmann::json Predictor::to_json() const {
    nlohmann::json doc = params_.to_json();
    doc["backbone"] = to_string(config_.backbone);
    doc["config"] = config_.to_json();
    doc["dataset_fingerprint"] = dataset_fingerprint_;
    return doc;
}

Predictor Predictor::from_json(const nlohmann::json& doc) {
    auto config = PredictorConfig::from_json(doc.at("config"));
    if (doc.at("backbone").get<std::string>() != to_string(config.backbone))
        throw std::invalid_argument("predictor: backbone header disagrees with config");
    Predictor p(config, ad::ParameterStore::from_json(doc));
    p.dataset_fingerprint_ = doc.value("dataset_fingerprint", std::string());
    return p;
}

Predictor init_predictor(const PredictorConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(stream_seed(seed, "predictor-init"));
    ad::ParameterStore ps;
    for (const auto& [name, shape] : layout(config)) {
        const auto [rows, cols] = shape;
        Matrix m(rows, cols);
        const std::string leaf = name.substr(name.rfind('.') + 1);
        if (name == "layer_emb" || name == "pos_emb") {
            for (double& v : m.values()) v = rng.normal(0.0, 1.0);
        } else if (leaf == "g") {
            m.fill(1.0);
        } else if (leaf.front() == 'w') {
            const double a = 1.0 / std::sqrt(static_cast<double>(rows));
            for (double& v : m.values()) v = rng.uniform(-a, a);
        }
        ps.add(name, std::move(m));
    }
    return Predictor(config, std::move(ps));
}

// ---------------------------------------------------------------------------
// Graph construction

namespace {

void check_budget(double b) {
    if (!(b >= 0.0 && b <= 1.0)) {
        std::ostringstream msg;
        msg << "predictor: budget " << b << " is outside [0, 1]";
        throw std::invalid_argument(msg.str());
    }
}

// The graph API takes a mutable store for backward(); forward passes never write to it.
ad::ParameterStore* store_of(const Predictor& p) { return const_cast<ad::ParameterStore*>(&p.params()); }

NodeId linear(Graph& g, NodeId x, const std::string& w, const std::string& b) {
    return g.add(g.matmul(x, g.parameter(w)), g.parameter(b));
}

NodeId budgets_column(Graph& g, std::span<const double> budgets) {
    return g.input(Matrix::column(budgets));
}

NodeId embed(Graph& g, const PredictorConfig& c, NodeId budgets) {
    NodeId h = g.activation(linear(g, budgets, "embed.w1", "embed.b1"), c.activation);
    return linear(g, h, "embed.w2", "embed.b2");
}

NodeId affine_norm(Graph& g, NodeId x, const std::string& gain, const std::string& bias) {
    return g.add(g.mul(g.layer_norm(x), g.parameter(gain)), g.parameter(bias));
}

// One post-norm encoder layer over `batch` stacked sequences of `seq` rows.
NodeId encoder_layer(Graph& g, const PredictorConfig& c, std::size_t k, NodeId x, std::size_t batch,
                     std::size_t seq, const Matrix& mask) {
    const std::size_t dh = c.hidden / c.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    NodeId q = linear(g, x, enc_name(k, "wq"), enc_name(k, "bq"));
    NodeId kk = linear(g, x, enc_name(k, "wk"), enc_name(k, "bk"));
    NodeId v = linear(g, x, enc_name(k, "wv"), enc_name(k, "bv"));
    std::vector<NodeId> sequences;
    sequences.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) {
        NodeId qs = batch == 1 ? q : g.slice_rows(q, s * seq, seq);
        NodeId ks = batch == 1 ? kk : g.slice_rows(kk, s * seq, seq);
        NodeId vs = batch == 1 ? v : g.slice_rows(v, s * seq, seq);
        std::vector<NodeId> heads;
        heads.reserve(c.heads);
        for (std::size_t h = 0; h < c.heads; ++h) {
            NodeId qh = g.slice_cols(qs, h * dh, dh);
            NodeId kh = g.slice_cols(ks, h * dh, dh);
            NodeId vh = g.slice_cols(vs, h * dh, dh);
            NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
            heads.push_back(g.matmul(g.masked_softmax(scores, mask), vh));
        }
        sequences.push_back(c.heads == 1 ? heads.front() : g.concat_cols(std::move(heads)));
    }
    NodeId attn = batch == 1 ? sequences.front() : g.concat_rows(std::move(sequences));
    attn = linear(g, attn, enc_name(k, "wo"), enc_name(k, "bo"));
    NodeId h = affine_norm(g, g.add(x, attn), enc_name(k, "ln1.g"), enc_name(k, "ln1.b"));
    NodeId ff = g.activation(linear(g, h, enc_name(k, "ff.w1"), enc_name(k, "ff.b1")), c.activation);
    ff = linear(g, ff, enc_name(k, "ff.w2"), enc_name(k, "ff.b2"));
    return affine_norm(g, g.add(h, ff), enc_name(k, "ln2.g"), enc_name(k, "ln2.b"));
}

NodeId encoder_head(Graph& g, const PredictorConfig& c, NodeId x, std::size_t batch, std::size_t seq,
                    const Matrix& mask) {
    for (std::size_t k = 0; k < c.encoder_layers; ++k) x = encoder_layer(g, c, k, x, batch, seq, mask);
    return g.activation(linear(g, x, "out.w", "out.b"), ad::Activation::sigmoid);
}

Matrix ones(std::size_t n) { return Matrix(n, n, 1.0); }

// Autoregressive input: x0 followed by theta_i * e_i for i < seq. `prefixes`
// holds batch rows of at least seq - 1 values each.
NodeId ar_inputs(Graph& g, const PredictorConfig& c, NodeId x0, std::size_t batch, std::size_t seq,
                 const std::vector<std::vector<double>>& prefixes) {
    if (seq == 1) return x0;
    NodeId emb = g.parameter("layer_emb");
    if (seq < c.sequence_length) emb = g.slice_rows(emb, 0, seq - 1);
    std::vector<NodeId> rows;
    rows.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) {
        Matrix scales(seq - 1, c.hidden);
        for (std::size_t i = 0; i + 1 < seq; ++i)
            for (std::size_t j = 0; j < c.hidden; ++j) scales(i, j) = prefixes[s][i];
        NodeId xs = batch == 1 ? x0 : g.slice_rows(x0, s, 1);
        rows.push_back(g.concat_rows({xs, g.mul(emb, g.input(std::move(scales)))}));
    }
    return batch == 1 ? rows.front() : g.concat_rows(std::move(rows));
}

NodeId parallel_inputs(Graph& g, const PredictorConfig& c, NodeId x0, std::size_t batch) {
    NodeId pos = g.parameter("pos_emb");
    std::vector<NodeId> rows;
    rows.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) rows.push_back(g.add(pos, batch == 1 ? x0 : g.slice_rows(x0, s, 1)));
    (void)c;
    return batch == 1 ? rows.front() : g.concat_rows(std::move(rows));
}

// Returns batch x L predictions.
NodeId mlp_graph(Graph& g, NodeId budgets) {
    NodeId h = g.activation(linear(g, budgets, "mlp.w1", "mlp.b1"), ad::Activation::relu);
    h = g.activation(linear(g, h, "mlp.w2", "mlp.b2"), ad::Activation::relu);
    return g.activation(linear(g, h, "mlp.w3", "mlp.b3"), ad::Activation::sigmoid);
}

// Returns batch x L predictions.
NodeId bilstm_graph(Graph& g, const PredictorConfig& c, NodeId budgets) {
    const std::size_t d = c.hidden, L = c.sequence_length;
    NodeId z = linear(g, budgets, "proj.w", "proj.b");
    auto run = [&](const std::string& dir) {
        const std::string p = "lstm." + dir + ".";
        // The input is the same at every position, so its projection is shared.
        NodeId xproj = linear(g, z, p + "wx", p + "b");
        NodeId wh = g.parameter(p + "wh");
        std::vector<NodeId> hs;
        std::optional<NodeId> h, cell;
        for (std::size_t t = 0; t < L; ++t) {
            NodeId gates = h ? g.add(xproj, g.matmul(*h, wh)) : xproj;
            NodeId i = g.activation(g.slice_cols(gates, 0, d), ad::Activation::sigmoid);
            NodeId f = g.activation(g.slice_cols(gates, d, d), ad::Activation::sigmoid);
            NodeId cand = g.activation(g.slice_cols(gates, 2 * d, d), ad::Activation::tanh);
            NodeId o = g.activation(g.slice_cols(gates, 3 * d, d), ad::Activation::sigmoid);
            NodeId ic = g.mul(i, cand);
            cell = cell ? g.add(g.mul(f, *cell), ic) : ic;
            h = g.mul(o, g.activation(*cell, ad::Activation::tanh));
            hs.push_back(*h);
        }
        return hs;
    };
    const auto fwd = run("fwd");
    const auto bwd = run("bwd");
    NodeId w = g.parameter("out.w"), bias = g.parameter("out.b");
    std::vector<NodeId> cols;
    cols.reserve(L);
    for (std::size_t t = 0; t < L; ++t) {
        NodeId both = g.concat_cols({fwd[t], bwd[L - 1 - t]});
        cols.push_back(g.add(g.matmul(both, w), bias));
    }
    NodeId logits = L == 1 ? cols.front() : g.concat_cols(std::move(cols));
    return g.activation(logits, ad::Activation::sigmoid);
}

std::vector<double> row_values(const Matrix& m, std::size_t row) {
    auto r = m.row_span(row);
    return {r.begin(), r.end()};
}

// Training labels must lie in the search box; graph inputs only in [0, 1].
void check_sample(const TrainingSample& s, std::size_t L, double lo) {
    if (s.theta.size() != L) {
        throw std::invalid_argument("predictor: sample has " + std::to_string(s.theta.size()) +
                                    " ratios, expected " + std::to_string(L));
    }
    if (!(s.b >= 0.0 && s.b <= 1.0)) throw std::invalid_argument("predictor: sample budget outside [0, 1]");
    for (double t : s.theta) {
        if (!(t >= lo && t <= search::kThetaMax)) {
            throw std::invalid_argument("predictor: sample ratio " + std::to_string(t) + " outside [" +
                                        std::to_string(lo) + ", 1]");
        }
    }
}

// Incremental decoder for the autoregressive backbone. It caches keys and
// values per encoder layer and repeats the graph's arithmetic in the same
// order, so each emitted value equals the corresponding graph output exactly.
class ArDecoder {
public:
    explicit ArDecoder(const Predictor& p) : p_(p), c_(p.config()) {
        cache_.resize(c_.encoder_layers);
    }

    // Pushes one input row and returns sigmoid(h w + b_out) for it.
    double push(const std::vector<double>& row) {
        const std::size_t d = c_.hidden, dh = d / c_.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> x = row;
        for (std::size_t k = 0; k < c_.encoder_layers; ++k) {
            auto& cache = cache_[k];
            const auto q = affine(x, enc_name(k, "wq"), enc_name(k, "bq"));
            cache.keys.push_back(affine(x, enc_name(k, "wk"), enc_name(k, "bk")));
            cache.values.push_back(affine(x, enc_name(k, "wv"), enc_name(k, "bv")));
            const std::size_t n = cache.keys.size();
            std::vector<double> attn(d, 0.0), w(n);
            for (std::size_t h = 0; h < c_.heads; ++h) {
                const std::size_t off = h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += q[off + t] * cache.keys[j][off + t];
                    w[j] = s * scale + 0.0;
                    mx = std::max(mx, w[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    w[j] = std::exp(w[j] - mx);
                    sum += w[j];
                }
                for (std::size_t j = 0; j < n; ++j) w[j] = w[j] / sum;
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t t = 0; t < dh; ++t) attn[off + t] += w[j] * cache.values[j][off + t];
            }
            auto o = affine(attn, enc_name(k, "wo"), enc_name(k, "bo"));
            for (std::size_t j = 0; j < d; ++j) o[j] = x[j] + o[j];
            auto h1 = norm(o, enc_name(k, "ln1.g"), enc_name(k, "ln1.b"));
            auto f = affine(h1, enc_name(k, "ff.w1"), enc_name(k, "ff.b1"));
            for (double& v : f) v = ad::apply_activation(c_.activation, v);
            auto f2 = affine(f, enc_name(k, "ff.w2"), enc_name(k, "ff.b2"));
            for (std::size_t j = 0; j < d; ++j) f2[j] = h1[j] + f2[j];
            x = norm(f2, enc_name(k, "ln2.g"), enc_name(k, "ln2.b"));
        }
        const auto y = affine(x, "out.w", "out.b");
        return ad::apply_activation(ad::Activation::sigmoid, y[0]);
    }

    std::vector<double> affine(const std::vector<double>& x, const std::string& w, const std::string& b) const {
        const Matrix& W = p_.params().value(w);
        const Matrix& B = p_.params().value(b);
        std::vector<double> out(W.cols(), 0.0);
        for (std::size_t i = 0; i < W.rows(); ++i) {
            const double xv = x[i];
            const double* wrow = W.data() + i * W.cols();
            for (std::size_t j = 0; j < W.cols(); ++j) out[j] += xv * wrow[j];
        }
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = out[j] + B[j];
        return out;
    }

private:
    std::vector<double> norm(const std::vector<double>& a, const std::string& gain, const std::string& bias) const {
        const std::size_t n = a.size();
        double mean = 0.0;
        for (double v : a) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : a) {
            const double dv = v - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var < ad::kLayerNormEpsilon ? ad::kLayerNormEpsilon : var);
        const Matrix& g = p_.params().value(gain);
        const Matrix& b = p_.params().value(bias);
        std::vector<double> out(n);
        for (std::size_t j = 0; j < n; ++j) out[j] = (a[j] - mean) * inv * g[j] + b[j];
        return out;
    }

    struct Cache {
        std::vector<std::vector<double>> keys, values;
    };
    const Predictor& p_;
    const PredictorConfig& c_;
    std::vector<Cache> cache_;
};

}  // namespace

Matrix embed_constraint(double b, const Predictor& predictor) {
    check_budget(b);
    const auto backbone = predictor.config().backbone;
    if (backbone != Backbone::transformer_ar && backbone != Backbone::transformer_parallel)
        throw std::invalid_argument("embed_constraint: backbone has no constraint embedding");
    Graph g(store_of(predictor));
    const double one[] = {b};
    NodeId x0 = embed(g, predictor.config(), budgets_column(g, one));
    return g.forward(x0);
}

std::vector<double> forward_autoregressive(double b, const Predictor& predictor, std::span<const double> known_prefix) {
    check_budget(b);
    const auto& c = predictor.config();
    if (c.backbone != Backbone::transformer_ar) throw std::invalid_argument("forward_autoregressive: wrong backbone");
    const std::size_t L = c.sequence_length;
    if (known_prefix.size() >= L && !known_prefix.empty())
        throw std::invalid_argument("forward_autoregressive: prefix must be shorter than the sequence");
    for (double v : known_prefix) {
        if (!(v > 0.0 && v < 1.0)) throw std::invalid_argument("forward_autoregressive: prefix value outside (0, 1)");
    }
    ArDecoder decoder(predictor);
    const double one[] = {b};
    std::vector<double> row;
    {
        Graph g(store_of(predictor));
        const Matrix& x0 = g.forward(embed(g, c, budgets_column(g, one)));
        row.assign(x0.values().begin(), x0.values().end());
    }
    const Matrix* emb = L > 1 ? &predictor.params().value("layer_emb") : nullptr;
    std::vector<double> out(L);
    for (std::size_t l = 0; l < L; ++l) {
        out[l] = decoder.push(row);
        if (l + 1 == L) break;
        const double theta = l < known_prefix.size() ? known_prefix[l] : out[l];
        for (std::size_t j = 0; j < c.hidden; ++j) row[j] = (*emb)(l, j) * theta;
    }
    return out;
}

std::vector<double> forward_parallel(double b, const Predictor& predictor) {
    check_budget(b);
    const auto& c = predictor.config();
    if (c.backbone != Backbone::transformer_parallel) throw std::invalid_argument("forward_parallel: wrong backbone");
    Graph g(store_of(predictor));
    const double one[] = {b};
    NodeId x = parallel_inputs(g, c, embed(g, c, budgets_column(g, one)), 1);
    NodeId y = encoder_head(g, c, x, 1, c.sequence_length, ones(c.sequence_length));
    const Matrix& m = g.forward(y);
    return {m.values().begin(), m.values().end()};
}

std::vector<double> forward_mlp(double b, const Predictor& predictor) {
    check_budget(b);
    if (predictor.config().backbone != Backbone::mlp) throw std::invalid_argument("forward_mlp: wrong backbone");
    Graph g(store_of(predictor));
    const double one[] = {b};
    return row_values(g.forward(mlp_graph(g, budgets_column(g, one))), 0);
}

std::vector<double> forward_bilstm(double b, const Predictor& predictor) {
    check_budget(b);
    if (predictor.config().backbone != Backbone::bilstm) throw std::invalid_argument("forward_bilstm: wrong backbone");
    Graph g(store_of(predictor));
    const double one[] = {b};
    return row_values(g.forward(bilstm_graph(g, predictor.config(), budgets_column(g, one))), 0);
}

std::vector<double> forward(double b, const Predictor& predictor) {
    switch (predictor.config().backbone) {
        case Backbone::transformer_ar: return forward_autoregressive(b, predictor);
        case Backbone::transformer_parallel: return forward_parallel(b, predictor);
        case Backbone::bilstm: return forward_bilstm(b, predictor);
        case Backbone::mlp: return forward_mlp(b, predictor);
    }
    throw std::logic_error("forward: unknown backbone");
}

double compute_loss(std::span<const double> prediction, std::span<const double> target) {
    if (prediction.size() != target.size() || prediction.empty()) {
        throw std::invalid_argument("compute_loss: lengths " + std::to_string(prediction.size()) + " and " +
                                    std::to_string(target.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double e = prediction[i] - target[i];
        s += e * e;
    }
    return s / static_cast<double>(prediction.size());
}

BatchGraph build_batch_graph(Graph& g, const Predictor& predictor, std::span<const TrainingSample> batch,
                             bool teacher_forcing) {
    const auto& c = predictor.config();
    const std::size_t L = c.sequence_length, B = batch.size();
    if (B == 0) throw std::invalid_argument("predictor: empty batch");
    std::vector<double> budgets;
    Matrix target(B * L, 1);
    for (std::size_t s = 0; s < B; ++s) {
        check_sample(batch[s], L, 0.0);
        budgets.push_back(batch[s].b);
        for (std::size_t l = 0; l < L; ++l) target(s * L + l, 0) = batch[s].theta[l];
    }
    NodeId bcol = budgets_column(g, budgets);
    NodeId pred{};
    switch (c.backbone) {
        case Backbone::transformer_ar: {
            std::vector<std::vector<double>> prefixes(B, std::vector<double>(L, 0.0));
            if (teacher_forcing)
                for (std::size_t s = 0; s < B; ++s) prefixes[s] = batch[s].theta;
            NodeId x = ar_inputs(g, c, embed(g, c, bcol), B, L, prefixes);
            pred = encoder_head(g, c, x, B, L, ad::causal_mask(L));
            break;
        }
        case Backbone::transformer_parallel: {
            NodeId x = parallel_inputs(g, c, embed(g, c, bcol), B);
            pred = encoder_head(g, c, x, B, L, ones(L));
            break;
        }
        case Backbone::bilstm:
        case Backbone::mlp: {
            NodeId wide = c.backbone == Backbone::mlp ? mlp_graph(g, bcol) : bilstm_graph(g, c, bcol);
            // B x L to sample-major column.
            std::vector<NodeId> rows;
            rows.reserve(B * L);
            for (std::size_t s = 0; s < B; ++s) {
                NodeId r = B == 1 ? wide : g.slice_rows(wide, s, 1);
                for (std::size_t l = 0; l < L; ++l) rows.push_back(L == 1 ? r : g.slice_cols(r, l, 1));
            }
            pred = rows.size() == 1 ? rows.front() : g.concat_rows(std::move(rows));
            break;
        }
    }
    NodeId loss = g.mse(pred, g.input(std::move(target)));
    return {pred, loss};
}

std::vector<double> train(Predictor& predictor, std::span<const TrainingSample> samples, const TrainConfig& config) {
    config.validate();
    if (samples.empty()) throw std::invalid_argument("train: no samples");
    for (const auto& s : samples) check_sample(s, predictor.config().sequence_length, search::kThetaMin);
    auto opt = ad::make_adam(predictor.params(), config.learning_rate);
    Rng rng(stream_seed(config.seed, "predictor-shuffle"));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> curve;
    std::vector<TrainingSample> batch;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double total = 0.0;
        for (std::size_t start = 0, bi = 0; start < order.size(); start += config.batch_size, ++bi) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t k = start; k < end; ++k) batch.push_back(samples[order[k]]);
            Graph g(&predictor.params());
            const auto bg = build_batch_graph(g, predictor, batch, config.teacher_forcing);
            double loss = 0.0;
            try {
                loss = g.forward(bg.loss)(0, 0);
            } catch (const std::runtime_error&) {
                loss = std::numeric_limits<double>::quiet_NaN();
            }
            if (!std::isfinite(loss)) {
                throw std::runtime_error("predictor training diverged at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(bi));
            }
            g.backward(bg.loss);
            ad::optimizer_step(predictor.params(), opt);
            total += loss * static_cast<double>(batch.size());
        }
        curve.push_back(total / static_cast<double>(samples.size()));
    }
    return curve;
}

TrainResult train(std::span<const TrainingSample> samples, const PredictorConfig& config,
                  const TrainConfig& train_config) {
    TrainResult r{init_predictor(config, train_config.seed), {}};
    r.epoch_losses = train(r.predictor, samples, train_config);
    return r;
}

std::string loss_curve_csv(std::span<const double> epoch_losses) {
    std::string out = "epoch,mean_loss\n";
    char buf[64];
    for (std::size_t e = 0; e < epoch_losses.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e, epoch_losses[e]);
        out += buf;
    }
    return out;
}

Prediction predict(double b, const Predictor& predictor) {
    const auto start = std::chrono::steady_clock::now();
    Prediction p;
    p.theta.theta = forward(b, predictor);
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return p;
}

PruningConfig project_to_constraint(const PruningConfig& theta, double b) {
    if (theta.theta.empty()) throw std::invalid_argument("project_to_constraint: empty config");
    if (!(b >= search::kThetaMin)) {
        std::ostringstream msg;
        msg << "project_to_constraint: b = " << b << " is below the smallest ratio " << search::kThetaMin;
        throw std::invalid_argument(msg.str());
    }
    PruningConfig out = theta;
    for (double& t : out.theta) {
        if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("project_to_constraint: ratio outside [0, 1]");
        t = search::clip_ratio(t);
    }
    const search::ConstraintSpec constraint{b};
    const double target = b * static_cast<double>(out.size());
    // Each round either meets the budget or pins at least one more ratio at the floor.
    for (std::size_t round = 0; round <= out.size() && !search::check_valid(out, constraint); ++round) {
        double sum = 0.0;
        std::size_t free = 0;
        for (double t : out.theta) {
            sum += t;
            if (t > search::kThetaMin) ++free;
        }
        const double shift = (sum - target) / static_cast<double>(free);
        for (double& t : out.theta)
            if (t > search::kThetaMin) t = search::clip_ratio(t - shift);
    }
    if (!search::check_valid(out, constraint)) throw std::logic_error("project_to_constraint: did not converge");
    return out;
}

}  // namespace lop::predictor
