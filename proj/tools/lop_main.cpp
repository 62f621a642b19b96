#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lop/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lop;
using pipeline::ErrorKind;
using pipeline::PipelineError;

namespace {

struct Options {
    std::string out = "run";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> model_spec;
    std::optional<std::string> metric;
    std::vector<double> b;
    std::optional<std::string> b_grid;
    std::optional<std::size_t> simulations;
    std::optional<std::size_t> eval_cap;
    std::optional<std::string> backbone;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr;
    std::vector<std::string> methods = pipeline::kBenchMethods;
    std::size_t repetitions = 5;
};

void fail(const std::string& command, ErrorKind kind, const std::string& message) {
    const nlohmann::json err = {{"error", {{"command", command}, {"kind", pipeline::to_string(kind)}, {"message", message}}}};
    std::cerr << err.dump() << std::endl;
}

// Applies command-line overrides to the manifest fields they name.
void apply_overrides(pipeline::RunManifest& m, const Options& o) {
    if (o.model_spec) {
        const auto doc = pipeline::read_json_file(*o.model_spec);
        try {
            m.model_spec = model::TargetModelSpec::from_json(doc);
        } catch (const std::exception& e) {
            throw PipelineError(ErrorKind::schema, *o.model_spec + ": " + e.what());
        }
    }
    if (o.metric) m.metric = importance::metric_from_string(*o.metric);
    if (o.b_grid) {
        pipeline::parse_b_grid(*o.b_grid);
        m.b_grid = *o.b_grid;
    }
    if (o.simulations) m.budget.simulations = *o.simulations;
    if (o.eval_cap) m.budget.eval_cap = *o.eval_cap;
    if (o.backbone) m.predictor.backbone = predictor::backbone_from_string(*o.backbone);
    if (o.epochs) m.train.epochs = *o.epochs;
    if (o.batch_size) m.train.batch_size = *o.batch_size;
    if (o.lr) m.train.learning_rate = *o.lr;
    m.budget.validate();
    m.train.validate();
}

// Later stages take their seed from the manifest; a conflicting --seed is an error.
pipeline::RunManifest update_manifest(const fs::path& dir, const Options& o) {
    if (!fs::exists(dir / pipeline::kManifestFile))
        throw PipelineError(ErrorKind::missing_file, (dir / pipeline::kManifestFile).string() + " not found; run pretrain first");
    auto m = pipeline::load_manifest(dir);
    if (o.seed && *o.seed != m.seed) {
        throw PipelineError(ErrorKind::invalid_argument, "--seed " + std::to_string(*o.seed) +
                                                             " conflicts with the run's seed " + std::to_string(m.seed));
    }
    apply_overrides(m, o);
    pipeline::save_manifest(dir, m);
    return m;
}

double single_b(const Options& o) {
    if (o.b.size() != 1) throw PipelineError(ErrorKind::invalid_argument, "exactly one --b value is required");
    return o.b.front();
}

void print(const nlohmann::json& doc) { std::cout << doc.dump() << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-wise pruning-ratio search and prediction on toy FFN stacks"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--out", o.out, "Run directory")->capture_default_str();
        cmd->add_option("--seed", o.seed, "Root seed of the run");
    };
    auto add_search = [&](CLI::App* cmd) {
        cmd->add_option("--simulations", o.simulations, "MCTS simulations per search");
        cmd->add_option("--eval-cap", o.eval_cap, "Distinct configurations evaluated per search");
    };
    auto add_train = [&](CLI::App* cmd) {
        cmd->add_option("--backbone", o.backbone, "transformer-ar | transformer-parallel | bilstm | mlp");
        cmd->add_option("--epochs", o.epochs, "Training epochs");
        cmd->add_option("--batch-size", o.batch_size, "Minibatch size");
        cmd->add_option("--lr", o.lr, "Adam learning rate");
    };

    auto* pretrain = app.add_subcommand("pretrain", "Train the dense toy model and write the data splits");
    add_common(pretrain);
    pretrain->add_option("--model-spec", o.model_spec, "JSON model spec");
    pretrain->add_option("--metric", o.metric, "activation-l2 | magnitude | wanda");
    pretrain->add_option("--b-grid", o.b_grid, "Dataset budgets as start:stop:step");
    add_search(pretrain);
    add_train(pretrain);

    auto* calibrate = app.add_subcommand("calibrate", "Score neuron importance on the calibration set");
    add_common(calibrate);
    calibrate->add_option("--metric", o.metric, "activation-l2 | magnitude | wanda");

    auto* search_cmd = app.add_subcommand("search", "Run one MCTS search at a budget");
    add_common(search_cmd);
    search_cmd->add_option("--b", o.b, "Mean pruning-ratio budget")->required()->expected(1);
    add_search(search_cmd);

    auto* gen = app.add_subcommand("gen-dataset", "Search every budget of the grid and write the training set");
    add_common(gen);
    gen->add_option("--b-grid", o.b_grid, "Budgets as start:stop:step");
    add_search(gen);

    auto* train = app.add_subcommand("train-predictor", "Fit the ratio predictor to the dataset");
    add_common(train);
    add_train(train);

    auto* predict = app.add_subcommand("predict", "Predict a configuration for a budget");
    add_common(predict);
    predict->add_option("--b", o.b, "Mean pruning-ratio budget")->required()->expected(1);

    auto* bench = app.add_subcommand("bench", "Compare pruning strategies and time them against MCTS");
    add_common(bench);
    bench->add_option("--b", o.b, "Budgets (comma separated)")->delimiter(',');
    bench->add_option("--methods", o.methods, "lop,mcts,magnitude,wanda,uniform,random")->delimiter(',');
    bench->add_option("--repetitions", o.repetitions, "Timing repetitions per method")->capture_default_str();

    std::string command = "lop";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        fail(command, ErrorKind::invalid_argument, e.what());
        return 2;
    }

    const fs::path dir = o.out;
    try {
        if (*pretrain) {
            command = "pretrain";
            pipeline::RunManifest m;
            m.seed = o.seed.value_or(0);
            apply_overrides(m, o);
            pipeline::cmd_pretrain(dir, m);
            const auto done = pipeline::load_manifest(dir);
            print({{"command", command}, {"model_fingerprint", done.fingerprints.at("model")}});
        } else if (*calibrate) {
            command = "calibrate";
            update_manifest(dir, o);
            pipeline::cmd_calibrate(dir);
            print({{"command", command}, {"importance", (dir / "importance.json").string()}});
        } else if (*search_cmd) {
            command = "search";
            update_manifest(dir, o);
            const auto r = pipeline::cmd_search(dir, single_b(o));
            print({{"command", command}, {"theta", r.best.theta}, {"reward", r.best_reward},
                   {"evaluations", r.model_evaluations}, {"seconds", r.seconds}});
        } else if (*gen) {
            command = "gen-dataset";
            update_manifest(dir, o);
            const auto ds = pipeline::cmd_gen_dataset(dir);
            print({{"command", command}, {"samples", ds.samples.size()}, {"fingerprint", ds.fingerprint()}});
        } else if (*train) {
            command = "train-predictor";
            update_manifest(dir, o);
            const auto curve = pipeline::cmd_train_predictor(dir);
            print({{"command", command}, {"epochs", curve.size()},
                   {"final_loss", curve.empty() ? nlohmann::json(nullptr) : nlohmann::json(curve.back())}});
        } else if (*predict) {
            command = "predict";
            update_manifest(dir, o);
            auto doc = pipeline::cmd_predict(dir, single_b(o));
            doc["command"] = command;
            print(doc);
        } else if (*bench) {
            command = "bench";
            update_manifest(dir, o);
            const auto budgets = o.b.empty() ? std::vector<double>{0.2, 0.3, 0.5} : o.b;
            const auto report = pipeline::cmd_bench(dir, budgets, o.methods, o.repetitions);
            if (report.lop_provenance == "untrained") {
                fail(command, ErrorKind::runtime, "warning: lop rows come from an untrained predictor");
            }
            std::cout << report.to_csv();
        }
    } catch (const PipelineError& e) {
        fail(command, e.kind(), e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        fail(command, ErrorKind::invalid_argument, e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        fail(command, ErrorKind::schema, e.what());
        return 2;
    } catch (const std::exception& e) {
        fail(command, ErrorKind::runtime, e.what());
        return 1;
    }
    return 0;
}
