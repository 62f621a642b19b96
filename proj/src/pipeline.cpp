#include "lop/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace lop::pipeline {

namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t h) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

std::string fingerprint_of(const nlohmann::json& doc) { return hex64(fnv1a64(doc.dump())); }

// Shortest round-trip decimal form, matching the JSON writer.
std::string format_double(double v) { return nlohmann::json(v).dump(); }

void write_json(const fs::path& path, const nlohmann::json& doc) { write_file_atomic(path, doc.dump(2) + "\n"); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json blobs_to_json(const model::BlobsConfig& c) {
    return {{"num_classes", c.num_classes}, {"dim", c.dim}, {"separation", c.separation}, {"sigma", c.sigma}};
}

model::BlobsConfig blobs_from_json(const nlohmann::json& doc) {
    model::BlobsConfig c;
    c.num_classes = doc.at("num_classes").get<std::size_t>();
    c.dim = doc.at("dim").get<std::size_t>();
    c.separation = doc.at("separation").get<double>();
    c.sigma = doc.at("sigma").get<double>();
    return c;
}

void check_budget(double b) {
    if (!std::isfinite(b) || b < search::kThetaMin || b > search::kThetaMax) {
        throw PipelineError(ErrorKind::invalid_argument,
                            "b = " + format_double(b) + " is outside [0.1, 1.0]; no configuration is valid");
    }
}

const std::string& artifact(const RunManifest& m, const std::string& role) {
    const auto it = m.artifacts.find(role);
    if (it == m.artifacts.end())
        throw PipelineError(ErrorKind::missing_file, "manifest has no '" + role + "' artifact; run the earlier stage");
    return it->second;
}

void expect_fingerprint(const RunManifest& m, const std::string& role, const std::string& actual) {
    const auto it = m.fingerprints.find(role);
    if (it == m.fingerprints.end() || it->second != actual) {
        throw PipelineError(ErrorKind::fingerprint, "'" + role + "' artifact fingerprint " + actual +
                                                        " does not match the manifest");
    }
}

// Records an artifact written by a stage.
void record(RunManifest& m, const std::string& role, const std::string& file, const std::string& fingerprint) {
    m.artifacts[role] = file;
    if (!fingerprint.empty()) m.fingerprints[role] = fingerprint;
}

template <typename F>
auto parse_artifact(const fs::path& path, F&& parse) {
    const auto doc = read_json_file(path);
    try {
        return parse(doc);
    } catch (const nlohmann::json::exception& e) {
        throw PipelineError(ErrorKind::schema, path.filename().string() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw PipelineError(ErrorKind::schema, path.filename().string() + ": " + e.what());
    }
}

predictor::Predictor load_predictor(const fs::path& dir, const RunManifest& m, const RunState& run) {
    auto p = parse_artifact(dir / artifact(m, "predictor"),
                            [](const nlohmann::json& doc) { return predictor::Predictor::from_json(doc); });
    if (p.config().sequence_length != run.model.layers()) {
        throw PipelineError(ErrorKind::schema, "predictor emits " + std::to_string(p.config().sequence_length) +
                                                   " ratios but the model has " +
                                                   std::to_string(run.model.layers()) + " layers");
    }
    if (p.trained()) {
        const auto it = m.fingerprints.find("dataset");
        if (it != m.fingerprints.end() && it->second != p.dataset_fingerprint()) {
            throw PipelineError(ErrorKind::fingerprint, "predictor was trained on dataset " +
                                                            p.dataset_fingerprint() + ", the run has " + it->second);
        }
    }
    return p;
}

}  // namespace

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::missing_file: return "missing_file";
        case ErrorKind::schema: return "schema";
        case ErrorKind::fingerprint: return "fingerprint";
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::runtime: return "runtime";
    }
    return "runtime";
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw PipelineError(ErrorKind::runtime, "cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw PipelineError(ErrorKind::runtime, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PipelineError(ErrorKind::missing_file, "cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

nlohmann::json read_json_file(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw PipelineError(ErrorKind::schema, path.filename().string() + " is not valid JSON: " + e.what());
    }
}

std::vector<double> parse_b_grid(const std::string& text) {
    std::vector<double> parts;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ':')) {
        try {
            std::size_t used = 0;
            parts.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw PipelineError(ErrorKind::invalid_argument, "b-grid '" + text + "': '" + item + "' is not a number");
        }
    }
    if (parts.size() != 3) throw PipelineError(ErrorKind::invalid_argument, "b-grid must be start:stop:step");
    try {
        return search::grid_values(parts[0], parts[1], parts[2]);
    } catch (const std::invalid_argument& e) {
        throw PipelineError(ErrorKind::invalid_argument, e.what());
    }
}

std::uint64_t RunManifest::model_seed() const { return stream_seed(seed, "model"); }
std::uint64_t RunManifest::data_seed() const { return stream_seed(seed, "data"); }
std::uint64_t RunManifest::search_seed() const { return stream_seed(seed, "search"); }
std::uint64_t RunManifest::train_seed() const { return stream_seed(seed, "train"); }

search::SearchBudget RunManifest::seeded_budget() const {
    auto b = budget;
    b.seed = search_seed();
    return b;
}

predictor::TrainConfig RunManifest::seeded_train() const {
    auto t = train;
    t.seed = train_seed();
    return t;
}

model::PretrainConfig RunManifest::seeded_pretrain() const {
    auto p = pretrain;
    p.seed = stream_seed(model_seed(), "pretrain");
    return p;
}

nlohmann::json RunManifest::to_json() const {
    return {
        {"tool_version", tool_version},
        {"seed", seed},
        {"model_spec", model_spec.to_json()},
        {"blobs", blobs_to_json(blobs)},
        {"data", {{"train", data.train}, {"calibration", data.calibration}, {"eval", data.eval}}},
        {"pretrain",
         {{"epochs", pretrain.epochs}, {"batch_size", pretrain.batch_size}, {"learning_rate", pretrain.learning_rate}}},
        {"metric", importance::to_string(metric)},
        {"b_grid", b_grid},
        {"search",
         {{"simulations", budget.simulations},
          {"eval_cap", budget.eval_cap},
          {"max_children", budget.max_children},
          {"exploration", budget.exploration},
          {"grid_step", budget.grid_step}}},
        {"predictor", predictor.to_json()},
        {"train",
         {{"batch_size", train.batch_size},
          {"epochs", train.epochs},
          {"learning_rate", train.learning_rate},
          {"teacher_forcing", train.teacher_forcing}}},
        {"artifacts", artifacts},
        {"fingerprints", fingerprints},
    };
}

RunManifest RunManifest::from_json(const nlohmann::json& doc) {
    RunManifest m;
    m.tool_version = doc.at("tool_version").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.model_spec = model::TargetModelSpec::from_json(doc.at("model_spec"));
    m.blobs = blobs_from_json(doc.at("blobs"));
    const auto& d = doc.at("data");
    m.data = {d.at("train").get<std::size_t>(), d.at("calibration").get<std::size_t>(), d.at("eval").get<std::size_t>()};
    const auto& p = doc.at("pretrain");
    m.pretrain.epochs = p.at("epochs").get<std::size_t>();
    m.pretrain.batch_size = p.at("batch_size").get<std::size_t>();
    m.pretrain.learning_rate = p.at("learning_rate").get<double>();
    m.metric = importance::metric_from_string(doc.at("metric").get<std::string>());
    m.b_grid = doc.at("b_grid").get<std::string>();
    const auto& s = doc.at("search");
    m.budget.simulations = s.at("simulations").get<std::size_t>();
    m.budget.eval_cap = s.at("eval_cap").get<std::size_t>();
    m.budget.max_children = s.at("max_children").get<std::size_t>();
    m.budget.exploration = s.at("exploration").get<double>();
    m.budget.grid_step = s.at("grid_step").get<double>();
    m.predictor = predictor::PredictorConfig::from_json(doc.at("predictor"));
    const auto& t = doc.at("train");
    m.train.batch_size = t.at("batch_size").get<std::size_t>();
    m.train.epochs = t.at("epochs").get<std::size_t>();
    m.train.learning_rate = t.at("learning_rate").get<double>();
    m.train.teacher_forcing = t.at("teacher_forcing").get<bool>();
    m.artifacts = doc.at("artifacts").get<std::map<std::string, std::string>>();
    m.fingerprints = doc.at("fingerprints").get<std::map<std::string, std::string>>();
    return m;
}

RunManifest load_manifest(const fs::path& dir) {
    const fs::path path = dir / kManifestFile;
    if (!fs::exists(path)) return RunManifest{};
    return parse_artifact(path, [](const nlohmann::json& doc) { return RunManifest::from_json(doc); });
}

void save_manifest(const fs::path& dir, const RunManifest& manifest) { write_json(dir / kManifestFile, manifest.to_json()); }

PruningConfig baseline_uniform(double b, std::size_t layers) {
    check_budget(b);
    if (layers == 0) throw PipelineError(ErrorKind::invalid_argument, "uniform baseline: no layers");
    return PruningConfig{std::vector<double>(layers, b)};
}

std::vector<StrategyTiming> time_strategies(const std::vector<Strategy>& strategies, std::size_t repetitions) {
    if (repetitions == 0) throw PipelineError(ErrorKind::invalid_argument, "repetitions must be >= 1");
    std::vector<StrategyTiming> out;
    for (const auto& s : strategies) {
        StrategyTiming t{s.method, {}, 0.0};
        std::size_t reps = repetitions;
        for (int attempt = 0;; ++attempt) {
            std::vector<double> times;
            for (std::size_t r = 0; r < reps; ++r) {
                const auto start = std::chrono::steady_clock::now();
                t.output = s.produce();
                times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
            }
            t.seconds = median(times);
            if (t.seconds > 0.0) break;
            if (attempt == 4) {
                throw PipelineError(ErrorKind::runtime,
                                    "timing: '" + s.method + "' measured zero time in 5 attempts");
            }
            reps *= 2;
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<BenchRow> measure_speedup(const std::vector<Strategy>& strategies, double b, std::size_t repetitions,
                                      const std::function<double(const model::MaskSet&)>& accuracy,
                                      double dense_accuracy, const std::string& reference) {
    if (strategies.empty()) throw PipelineError(ErrorKind::invalid_argument, "bench: no methods");
    const auto timings = time_strategies(strategies, repetitions);
    double ref_seconds = timings.front().seconds;
    for (const auto& t : timings)
        if (t.method == reference) ref_seconds = t.seconds;
    std::vector<BenchRow> rows;
    for (const auto& t : timings) {
        BenchRow row;
        row.method = t.method;
        row.b = b;
        row.accuracy = accuracy(t.output.masks);
        row.acc_drop = dense_accuracy - row.accuracy;
        row.strategy_seconds = t.seconds;
        row.speedup = ref_seconds / t.seconds;
        row.config = t.output.config;
        row.masks = t.output.masks;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string BenchReport::to_csv() const {
    std::string out = "method,b,accuracy,acc_drop,strategy_seconds,speedup\n";
    for (const auto& r : rows) {
        out += r.method + "," + format_double(r.b) + "," + format_double(r.accuracy) + "," + format_double(r.acc_drop) +
               "," + format_double(r.strategy_seconds) + "," + format_double(r.speedup) + "\n";
    }
    return out;
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json rows_doc = nlohmann::json::array();
    for (const auto& r : rows) {
        rows_doc.push_back({{"method", r.method},
                            {"b", r.b},
                            {"accuracy", r.accuracy},
                            {"acc_drop", r.acc_drop},
                            {"heldout_accuracy", r.heldout_accuracy},
                            {"strategy_seconds", r.strategy_seconds},
                            {"speedup", r.speedup},
                            {"theta", r.config.theta}});
    }
    nlohmann::json doc = {{"reference", reference},
                          {"dense_accuracy", dense_accuracy},
                          {"dense_heldout_accuracy", dense_heldout_accuracy},
                          {"rows", rows_doc}};
    if (!lop_provenance.empty()) doc["lop_provenance"] = lop_provenance;
    return doc;
}

RunState load_run(const fs::path& dir) {
    RunState run;
    run.manifest = load_manifest(dir);
    const auto& m = run.manifest;
    run.model = parse_artifact(dir / artifact(m, "model"),
                               [](const nlohmann::json& doc) { return model::TargetModel::from_json(doc); });
    expect_fingerprint(m, "model", run.model.fingerprint());
    auto load_split = [&](const std::string& role) {
        const fs::path path = dir / artifact(m, role);
        const auto doc = read_json_file(path);
        expect_fingerprint(m, role, fingerprint_of(doc));
        return parse_artifact(path, [&](const nlohmann::json& d) {
            auto set = model::CalibrationSet::from_json(d);
            set.validate(run.model.spec().input_dim, run.model.spec().num_classes);
            return set;
        });
    };
    run.calibration = load_split("calibration");
    run.eval = load_split("eval");
    return run;
}

importance::ImportanceTable load_importance(const fs::path& dir, const RunState& run) {
    const fs::path path = dir / artifact(run.manifest, "importance");
    const auto doc = read_json_file(path);
    const auto table = parse_artifact(path, [](const nlohmann::json& d) {
        return importance::ImportanceTable::from_json(d);
    });
    if (doc.value("model_fingerprint", std::string()) != run.model.fingerprint())
        throw PipelineError(ErrorKind::fingerprint, "importance table was computed for a different model");
    if (table.metric != run.manifest.metric) {
        throw PipelineError(ErrorKind::fingerprint, std::string("importance table uses metric ") +
                                                        importance::to_string(table.metric) + ", the run uses " +
                                                        importance::to_string(run.manifest.metric));
    }
    if (table.widths() != run.model.spec().hidden_widths)
        throw PipelineError(ErrorKind::schema, "importance table widths differ from the model");
    return table;
}

void cmd_pretrain(const fs::path& dir, RunManifest m) {
    try {
        m.model_spec.validate();
    } catch (const std::invalid_argument& e) {
        throw PipelineError(ErrorKind::invalid_argument, e.what());
    }
    if (m.data.calibration > m.data.train || m.data.calibration == 0 || m.data.eval == 0)
        throw PipelineError(ErrorKind::invalid_argument, "data sizes: need 0 < calibration <= train and eval > 0");
    m.blobs.dim = m.model_spec.input_dim;
    m.blobs.num_classes = m.model_spec.num_classes;
    m.predictor.sequence_length = m.model_spec.num_layers;
    m.artifacts.clear();
    m.fingerprints.clear();

    const auto train = model::make_blobs(m.blobs, m.data.train, stream_seed(m.data_seed(), "train-split"));
    const auto eval = model::make_blobs(m.blobs, m.data.eval, stream_seed(m.data_seed(), "eval-split"));
    std::vector<std::size_t> front(m.data.calibration);
    for (std::size_t i = 0; i < front.size(); ++i) front[i] = i;
    const auto calibration = train.subset(front);

    auto net = model::build_model(m.model_spec, m.model_seed());
    model::pretrain(net, train, m.seeded_pretrain());

    const auto model_doc = net.to_json();
    const auto cal_doc = calibration.to_json();
    const auto eval_doc = eval.to_json();
    write_json(dir / "model.json", model_doc);
    write_json(dir / "calibration.json", cal_doc);
    write_json(dir / "eval.json", eval_doc);
    record(m, "model", "model.json", net.fingerprint());
    record(m, "calibration", "calibration.json", fingerprint_of(cal_doc));
    record(m, "eval", "eval.json", fingerprint_of(eval_doc));
    save_manifest(dir, m);
}

void cmd_calibrate(const fs::path& dir) {
    auto run = load_run(dir);
    const auto table = importance::compute_importance(run.model, run.calibration, run.manifest.metric);
    auto doc = table.to_json();
    doc["model_fingerprint"] = run.model.fingerprint();
    write_json(dir / "importance.json", doc);
    record(run.manifest, "importance", "importance.json", fingerprint_of(doc));
    save_manifest(dir, run.manifest);
}

search::SearchResult cmd_search(const fs::path& dir, double b) {
    check_budget(b);
    auto run = load_run(dir);
    const auto table = load_importance(dir, run);
    const auto result = search::run_search(run.model, table, run.calibration, {b}, run.manifest.seeded_budget());
    const nlohmann::json doc = {{"b", b},
                                {"theta", result.best.theta},
                                {"reward", result.best_reward},
                                {"model_evaluations", result.model_evaluations},
                                {"simulations_run", result.simulations_run},
                                {"tree_size", result.tree.size()},
                                {"seconds", result.seconds},
                                {"model_fingerprint", run.model.fingerprint()}};
    write_json(dir / "search.json", doc);
    write_file_atomic(dir / "search_trace.jsonl", search::search_trace_jsonl(result));
    record(run.manifest, "search", "search.json", "");
    record(run.manifest, "search_trace", "search_trace.jsonl", "");
    save_manifest(dir, run.manifest);
    return result;
}

search::Dataset cmd_gen_dataset(const fs::path& dir) {
    auto run = load_run(dir);
    const auto table = load_importance(dir, run);
    const auto grid = parse_b_grid(run.manifest.b_grid);
    if (grid.front() < search::kThetaMin)
        throw PipelineError(ErrorKind::invalid_argument, "b-grid starts below 0.1; no configuration is valid there");
    search::Dataset ds;
    ds.model_fingerprint = run.model.fingerprint();
    ds.metric = importance::to_string(table.metric);
    ds.samples = search::generate_dataset(run.model, table, run.calibration, grid, run.manifest.seeded_budget());
    write_json(dir / "dataset.json", ds.to_json());
    record(run.manifest, "dataset", "dataset.json", ds.fingerprint());
    save_manifest(dir, run.manifest);
    return ds;
}

std::vector<double> cmd_train_predictor(const fs::path& dir) {
    auto run = load_run(dir);
    auto& m = run.manifest;
    const auto ds = parse_artifact(dir / artifact(m, "dataset"),
                                   [](const nlohmann::json& doc) { return search::Dataset::from_json(doc); });
    expect_fingerprint(m, "dataset", ds.fingerprint());
    if (ds.model_fingerprint != run.model.fingerprint())
        throw PipelineError(ErrorKind::fingerprint, "dataset was generated for a different model");
    if (ds.metric != importance::to_string(m.metric))
        throw PipelineError(ErrorKind::fingerprint, "dataset metric " + ds.metric + " differs from the run's");
    m.predictor.sequence_length = run.model.layers();

    auto p = predictor::init_predictor(m.predictor, m.train_seed());
    const auto curve = predictor::train(p, ds.samples, m.seeded_train());
    // Zero epochs leave the initial parameters, which are not fitted to anything.
    if (!curve.empty()) p.set_dataset_fingerprint(ds.fingerprint());

    write_json(dir / "predictor.json", p.to_json());
    write_file_atomic(dir / "loss_curve.csv", predictor::loss_curve_csv(curve));
    record(m, "predictor", "predictor.json", p.trained() ? p.dataset_fingerprint() : "");
    record(m, "loss_curve", "loss_curve.csv", "");
    save_manifest(dir, m);
    return curve;
}

nlohmann::json cmd_predict(const fs::path& dir, double b) {
    check_budget(b);
    auto run = load_run(dir);
    const auto p = load_predictor(dir, run.manifest, run);
    const auto pred = predictor::predict(b, p);
    const auto projected = predictor::project_to_constraint(pred.theta, b);
    const nlohmann::json doc = {{"b", b},
                                {"backbone", predictor::to_string(p.config().backbone)},
                                {"raw_theta", pred.theta.theta},
                                {"theta", projected.theta},
                                {"trained", p.trained()},
                                {"dataset_fingerprint", p.dataset_fingerprint()},
                                {"seconds", pred.seconds}};
    write_json(dir / "prediction.json", doc);
    record(run.manifest, "prediction", "prediction.json", "");
    save_manifest(dir, run.manifest);
    return doc;
}

BenchReport cmd_bench(const fs::path& dir, const std::vector<double>& budgets, const std::vector<std::string>& methods,
                      std::size_t repetitions) {
    if (budgets.empty()) throw PipelineError(ErrorKind::invalid_argument, "bench: no budgets");
    for (double b : budgets) check_budget(b);
    for (const auto& name : methods) {
        if (std::find(kBenchMethods.begin(), kBenchMethods.end(), name) == kBenchMethods.end())
            throw PipelineError(ErrorKind::invalid_argument, "bench: unknown method '" + name + "'");
    }
    // Canonical order; mcts runs before random so the random baseline can match its evaluation count.
    std::vector<std::string> ordered;
    for (const auto& name : kBenchMethods)
        if (std::find(methods.begin(), methods.end(), name) != methods.end()) ordered.push_back(name);

    auto run = load_run(dir);
    const auto& m = run.manifest;
    const auto& net = run.model;
    const auto widths = net.spec().hidden_widths;
    const auto table = load_importance(dir, run);
    const bool want_lop = std::find(ordered.begin(), ordered.end(), "lop") != ordered.end();
    std::unique_ptr<predictor::Predictor> lop;
    if (want_lop) lop = std::make_unique<predictor::Predictor>(load_predictor(dir, m, run));

    BenchReport report;
    report.dense_accuracy = model::evaluate_dense(net, run.calibration).accuracy;
    report.dense_heldout_accuracy = model::evaluate_dense(net, run.eval).accuracy;
    if (lop) report.lop_provenance = lop->trained() ? "trained" : "untrained";

    for (double b : budgets) {
        const auto uniform = baseline_uniform(b, net.layers());
        std::size_t mcts_evaluations = m.budget.eval_cap;
        std::vector<Strategy> strategies;
        for (const auto& name : ordered) {
            std::function<StrategyOutput()> produce;
            if (name == "lop") {
                produce = [&, b] {
                    const auto theta = predictor::project_to_constraint(predictor::predict(b, *lop).theta, b);
                    return StrategyOutput{theta, importance::config_to_masks(theta, table, widths)};
                };
            } else if (name == "mcts") {
                produce = [&, b] {
                    const auto r = search::run_search(net, table, run.calibration, {b}, m.seeded_budget());
                    mcts_evaluations = r.model_evaluations;
                    return StrategyOutput{r.best, importance::config_to_masks(r.best, table, widths)};
                };
            } else if (name == "magnitude") {
                produce = [&] {
                    const auto t = importance::score_magnitude(net);
                    return StrategyOutput{uniform, importance::config_to_masks(uniform, t, widths)};
                };
            } else if (name == "wanda") {
                produce = [&] {
                    const auto t = importance::compute_importance(net, run.calibration, importance::Metric::wanda);
                    return StrategyOutput{uniform, importance::config_to_masks(uniform, t, widths)};
                };
            } else if (name == "uniform") {
                produce = [&] { return StrategyOutput{uniform, importance::config_to_masks(uniform, table, widths)}; };
            } else {
                produce = [&, b] {
                    search::RewardCache rewards(net, table, run.calibration);
                    const auto best = search::random_search_baseline(rewards, net.layers(), {b}, mcts_evaluations,
                                                                     stream_seed(m.search_seed(), "random"));
                    return StrategyOutput{best.config, importance::config_to_masks(best.config, table, widths)};
                };
            }
            strategies.push_back({name, std::move(produce)});
        }
        auto rows = measure_speedup(
            strategies, b, repetitions,
            [&](const model::MaskSet& masks) { return model::evaluate(net, masks, run.calibration).accuracy; },
            report.dense_accuracy);
        for (auto& row : rows) {
            row.heldout_accuracy = model::evaluate(net, row.masks, run.eval).accuracy;
            report.rows.push_back(std::move(row));
        }
    }

    write_file_atomic(dir / "bench.csv", report.to_csv());
    write_json(dir / "bench.json", report.to_json());
    RunManifest updated = m;
    record(updated, "bench", "bench.csv", "");
    record(updated, "bench_report", "bench.json", "");
    save_manifest(dir, updated);
    return report;
}

void run_all(const fs::path& dir, const RunManifest& manifest, const std::vector<double>& bench_budgets,
             std::size_t repetitions) {
    cmd_pretrain(dir, manifest);
    cmd_calibrate(dir);
    cmd_gen_dataset(dir);
    cmd_train_predictor(dir);
    cmd_predict(dir, bench_budgets.empty() ? 0.3 : bench_budgets.front());
    cmd_bench(dir, bench_budgets, kBenchMethods, repetitions);
}

}  // namespace lop::pipeline
