#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lop/pipeline.hpp"

namespace py = pybind11;
using namespace lop;

namespace {

// JSON crosses the boundary as Python objects through the json module.
py::object to_py(const nlohmann::json& doc) { return py::module_::import("json").attr("loads")(doc.dump()); }

nlohmann::json from_py(const py::object& obj) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

search::SearchBudget make_budget(std::size_t simulations, std::size_t eval_cap, std::uint64_t seed, double grid_step) {
    search::SearchBudget budget;
    budget.simulations = simulations;
    budget.eval_cap = eval_cap;
    budget.seed = seed;
    budget.grid_step = grid_step;
    budget.validate();
    return budget;
}

py::dict best_to_dict(const search::BestConfig& best) {
    py::dict d;
    d["theta"] = best.config.theta;
    d["reward"] = best.reward;
    d["evaluations"] = best.evaluations;
    return d;
}

std::vector<search::TrainingSample> samples_from_py(const py::object& samples) {
    return search::Dataset::from_json({{"model_fingerprint", ""}, {"metric", ""}, {"samples", from_py(samples)}})
        .samples;
}

}  // namespace

PYBIND11_MODULE(_lop, m) {
    m.doc() = "Layer-wise pruning-ratio search and prediction on toy FFN stacks";

    py::register_exception<pipeline::PipelineError>(m, "PipelineError", PyExc_RuntimeError);

    py::class_<model::CalibrationSet>(m, "CalibrationSet")
        .def_readonly("inputs", &model::CalibrationSet::inputs)
        .def_readonly("labels", &model::CalibrationSet::labels)
        .def("__len__", &model::CalibrationSet::size)
        .def("to_json", [](const model::CalibrationSet& s) { return to_py(s.to_json()); });

    m.def(
        "make_blobs",
        [](std::size_t count, std::uint64_t seed, std::size_t num_classes, std::size_t dim, double separation,
           double sigma) { return model::make_blobs({num_classes, dim, separation, sigma}, count, seed); },
        py::arg("count"), py::arg("seed"), py::arg("num_classes") = 4, py::arg("dim") = 16,
        py::arg("separation") = 4.0, py::arg("sigma") = 1.0);

    py::class_<model::TargetModel>(m, "TargetModel")
        .def_property_readonly("layers", &model::TargetModel::layers)
        .def("width", &model::TargetModel::width)
        .def("fingerprint", &model::TargetModel::fingerprint)
        .def("spec", [](const model::TargetModel& t) { return to_py(t.spec().to_json()); })
        .def("to_json", [](const model::TargetModel& t) { return to_py(t.to_json()); })
        .def_static("from_json", [](const py::object& doc) { return model::TargetModel::from_json(from_py(doc)); });

    m.def(
        "build_model",
        [](const py::object& spec, std::uint64_t seed) {
            const auto s = spec.is_none() ? model::TargetModelSpec{} : model::TargetModelSpec::from_json(from_py(spec));
            return model::build_model(s, seed);
        },
        py::arg("spec") = py::none(), py::arg("seed") = 0);

    m.def(
        "pretrain",
        [](model::TargetModel& net, const model::CalibrationSet& data, std::size_t epochs, std::size_t batch_size,
           double lr, std::uint64_t seed) {
            const auto r = model::pretrain(net, data, {epochs, batch_size, lr, seed});
            py::dict d;
            d["train_accuracy"] = r.train_accuracy;
            d["epoch_losses"] = r.epoch_losses;
            return d;
        },
        py::arg("model"), py::arg("data"), py::arg("epochs") = 30, py::arg("batch_size") = 64, py::arg("lr") = 1e-3,
        py::arg("seed") = 0);

    m.def("evaluate_dense", [](const model::TargetModel& net, const model::CalibrationSet& data) {
        return model::evaluate_dense(net, data).accuracy;
    });

    py::class_<importance::ImportanceTable>(m, "ImportanceTable")
        .def_readonly("layers", &importance::ImportanceTable::layers)
        .def_property_readonly("metric",
                               [](const importance::ImportanceTable& t) { return importance::to_string(t.metric); })
        .def("widths", &importance::ImportanceTable::widths)
        .def("to_json", [](const importance::ImportanceTable& t) { return to_py(t.to_json()); });

    m.def(
        "compute_importance",
        [](const model::TargetModel& net, const model::CalibrationSet& data, const std::string& metric) {
            return importance::compute_importance(net, data, importance::metric_from_string(metric));
        },
        py::arg("model"), py::arg("data"), py::arg("metric") = "activation-l2");

    m.def("config_to_masks", [](const std::vector<double>& theta, const importance::ImportanceTable& table) {
        const auto widths = table.widths();
        return importance::config_to_masks(PruningConfig{theta}, table, widths).keep;
    });

    m.def("evaluate_config", [](const std::vector<double>& theta, const model::TargetModel& net,
                                const importance::ImportanceTable& table, const model::CalibrationSet& data) {
        return search::evaluate_config(PruningConfig{theta}, net, table, data);
    });

    m.def(
        "run_search",
        [](const model::TargetModel& net, const importance::ImportanceTable& table, const model::CalibrationSet& data,
           double b, std::size_t simulations, std::size_t eval_cap, std::uint64_t seed, double grid_step) {
            const auto r = search::run_search(net, table, data, {b}, make_budget(simulations, eval_cap, seed, grid_step));
            py::dict d;
            d["theta"] = r.best.theta;
            d["reward"] = r.best_reward;
            d["model_evaluations"] = r.model_evaluations;
            d["simulations_run"] = r.simulations_run;
            d["tree_size"] = r.tree.size();
            d["seconds"] = r.seconds;
            return d;
        },
        py::arg("model"), py::arg("table"), py::arg("data"), py::arg("b"), py::arg("simulations") = 300,
        py::arg("eval_cap") = 200, py::arg("seed") = 0, py::arg("grid_step") = 0.0);

    m.def(
        "brute_force_oracle",
        [](const model::TargetModel& net, const importance::ImportanceTable& table, const model::CalibrationSet& data,
           double b, double grid_step) {
            search::RewardCache rewards(net, table, data);
            return best_to_dict(search::brute_force_oracle(rewards, net.layers(), {b}, grid_step));
        },
        py::arg("model"), py::arg("table"), py::arg("data"), py::arg("b"), py::arg("grid_step") = 0.1);

    m.def(
        "random_search_baseline",
        [](const model::TargetModel& net, const importance::ImportanceTable& table, const model::CalibrationSet& data,
           double b, std::size_t samples, std::uint64_t seed) {
            search::RewardCache rewards(net, table, data);
            return best_to_dict(search::random_search_baseline(rewards, net.layers(), {b}, samples, seed));
        },
        py::arg("model"), py::arg("table"), py::arg("data"), py::arg("b"), py::arg("samples"), py::arg("seed") = 0);

    m.def(
        "generate_dataset",
        [](const model::TargetModel& net, const importance::ImportanceTable& table, const model::CalibrationSet& data,
           const std::vector<double>& b_grid, std::size_t simulations, std::size_t eval_cap, std::uint64_t seed) {
            search::Dataset ds;
            ds.samples = search::generate_dataset(net, table, data, b_grid, make_budget(simulations, eval_cap, seed, 0.0));
            return to_py(ds.to_json().at("samples"));
        },
        py::arg("model"), py::arg("table"), py::arg("data"), py::arg("b_grid"), py::arg("simulations") = 300,
        py::arg("eval_cap") = 200, py::arg("seed") = 0);

    py::class_<predictor::Predictor>(m, "Predictor")
        .def("config", [](const predictor::Predictor& p) { return to_py(p.config().to_json()); })
        .def_property_readonly("trained", &predictor::Predictor::trained)
        .def("to_json", [](const predictor::Predictor& p) { return to_py(p.to_json()); })
        .def_static("from_json", [](const py::object& doc) { return predictor::Predictor::from_json(from_py(doc)); });

    m.def(
        "init_predictor",
        [](const py::object& config, std::uint64_t seed) {
            const auto c = config.is_none() ? predictor::PredictorConfig{}
                                            : predictor::PredictorConfig::from_json(from_py(config));
            return predictor::init_predictor(c, seed);
        },
        py::arg("config") = py::none(), py::arg("seed") = 0);

    m.def(
        "train_predictor",
        [](const py::object& samples, const py::object& config, std::size_t batch_size, std::size_t epochs, double lr,
           std::uint64_t seed) {
            const auto c = config.is_none() ? predictor::PredictorConfig{}
                                            : predictor::PredictorConfig::from_json(from_py(config));
            predictor::TrainConfig tc;
            tc.batch_size = batch_size;
            tc.epochs = epochs;
            tc.learning_rate = lr;
            tc.seed = seed;
            const auto data = samples_from_py(samples);
            auto r = predictor::train(data, c, tc);
            return py::make_tuple(std::move(r.predictor), r.epoch_losses);
        },
        py::arg("samples"), py::arg("config") = py::none(), py::arg("batch_size") = 40, py::arg("epochs") = 64,
        py::arg("lr") = 1e-3, py::arg("seed") = 0);

    m.def("predict", [](double b, const predictor::Predictor& p) { return predictor::predict(b, p).theta.theta; });
    m.def("project_to_constraint", [](const std::vector<double>& theta, double b) {
        return predictor::project_to_constraint(PruningConfig{theta}, b).theta;
    });
    m.def("check_valid",
          [](const std::vector<double>& theta, double b) { return search::check_valid(PruningConfig{theta}, {b}); });

    auto p = m.def_submodule("pipeline", "Run-directory commands mirroring the lop command-line tool");
    p.def(
        "default_manifest",
        [](std::uint64_t seed) {
            pipeline::RunManifest man;
            man.seed = seed;
            return to_py(man.to_json());
        },
        py::arg("seed") = 0);
    p.def("pretrain", [](const std::filesystem::path& dir, const py::object& manifest) {
        pipeline::cmd_pretrain(dir, pipeline::RunManifest::from_json(from_py(manifest)));
    });
    p.def("calibrate", &pipeline::cmd_calibrate);
    p.def("search", [](const std::filesystem::path& dir, double b) {
        const auto r = pipeline::cmd_search(dir, b);
        py::dict d;
        d["theta"] = r.best.theta;
        d["reward"] = r.best_reward;
        d["model_evaluations"] = r.model_evaluations;
        return d;
    });
    p.def("gen_dataset", [](const std::filesystem::path& dir) {
        return to_py(pipeline::cmd_gen_dataset(dir).to_json().at("samples"));
    });
    p.def("train_predictor", &pipeline::cmd_train_predictor);
    p.def("predict", [](const std::filesystem::path& dir, double b) { return to_py(pipeline::cmd_predict(dir, b)); });
    p.def(
        "bench",
        [](const std::filesystem::path& dir, const std::vector<double>& budgets, const std::vector<std::string>& methods,
           std::size_t repetitions) {
            return to_py(pipeline::cmd_bench(dir, budgets, methods, repetitions).to_json());
        },
        py::arg("dir"), py::arg("budgets"), py::arg("methods") = pipeline::kBenchMethods,
        py::arg("repetitions") = 5);
}
