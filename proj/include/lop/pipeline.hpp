#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lop/importance.hpp"
#include "lop/mcts.hpp"
#include "lop/predictor.hpp"
#include "lop/target_model.hpp"

namespace lop::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kManifestFile = "manifest.json";

// Failure categories reported by the command-line tool.
enum class ErrorKind { missing_file, schema, fingerprint, invalid_argument, runtime };
const char* to_string(ErrorKind kind);

class PipelineError : public std::runtime_error {
public:
    PipelineError(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

// "start:stop:step", inclusive of stop.
std::vector<double> parse_b_grid(const std::string& text);

struct DataSizes {
    std::size_t train = 2000;
    std::size_t calibration = 500;  // drawn from the front of the train split
    std::size_t eval = 500;
};

struct RunManifest {
    std::uint64_t seed = 0;
    model::TargetModelSpec model_spec;
    model::BlobsConfig blobs;
    DataSizes data;
    model::PretrainConfig pretrain;  // its seed field is derived, not stored
    importance::Metric metric = importance::Metric::activation_l2;
    std::string b_grid = "0.1:0.7:0.025";
    search::SearchBudget budget;     // likewise
    predictor::PredictorConfig predictor;
    predictor::TrainConfig train;    // likewise
    std::map<std::string, std::string> artifacts;     // role -> file name in the run directory
    std::map<std::string, std::string> fingerprints;  // role -> content fingerprint
    std::string tool_version = kToolVersion;

    // Seeds of the named streams "model", "data", "search", "train".
    std::uint64_t model_seed() const;
    std::uint64_t data_seed() const;
    std::uint64_t search_seed() const;
    std::uint64_t train_seed() const;

    search::SearchBudget seeded_budget() const;
    predictor::TrainConfig seeded_train() const;
    model::PretrainConfig seeded_pretrain() const;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& doc);
};

// Reads manifest.json from the run directory, or returns defaults when absent.
RunManifest load_manifest(const std::filesystem::path& dir);
void save_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

// Uniform allocation: theta_l = b for every layer.
PruningConfig baseline_uniform(double b, std::size_t layers);

struct StrategyOutput {
    PruningConfig config;
    model::MaskSet masks;
};

struct Strategy {
    std::string method;
    std::function<StrategyOutput()> produce;
};

struct StrategyTiming {
    std::string method;
    StrategyOutput output;
    double seconds = 0.0;  // median over repetitions
};

// Runs each producer `repetitions` times and keeps the median wall-clock time.
// A zero median is re-measured with twice the repetitions; the fifth zero throws.
std::vector<StrategyTiming> time_strategies(const std::vector<Strategy>& strategies, std::size_t repetitions);

struct BenchRow {
    std::string method;
    double b = 0.0;
    double accuracy = 0.0;
    double acc_drop = 0.0;
    double strategy_seconds = 0.0;
    double speedup = 0.0;
    double heldout_accuracy = 0.0;
    PruningConfig config;
    model::MaskSet masks;
};

struct BenchReport {
    std::string reference = "mcts";
    double dense_accuracy = 0.0;
    double dense_heldout_accuracy = 0.0;
    std::string lop_provenance;  // "trained", "untrained", or empty when lop was not run
    std::vector<BenchRow> rows;

    // method,b,accuracy,acc_drop,strategy_seconds,speedup
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

// Times the strategies and scores each on the reward set. Speedup is the
// reference method's time over each method's time; without the reference method
// the first strategy serves as reference.
std::vector<BenchRow> measure_speedup(const std::vector<Strategy>& strategies, double b, std::size_t repetitions,
                                      const std::function<double(const model::MaskSet&)>& accuracy,
                                      double dense_accuracy, const std::string& reference = "mcts");

// Everything the later stages need, loaded from a run directory.
struct RunState {
    RunManifest manifest;
    model::TargetModel model;
    model::CalibrationSet calibration;
    model::CalibrationSet eval;
};

// Subcommands. Each reads its inputs from `dir`, writes its artifact there
// atomically, and updates the manifest.
void cmd_pretrain(const std::filesystem::path& dir, RunManifest manifest);
void cmd_calibrate(const std::filesystem::path& dir);
search::SearchResult cmd_search(const std::filesystem::path& dir, double b);
search::Dataset cmd_gen_dataset(const std::filesystem::path& dir);
std::vector<double> cmd_train_predictor(const std::filesystem::path& dir);
nlohmann::json cmd_predict(const std::filesystem::path& dir, double b);
BenchReport cmd_bench(const std::filesystem::path& dir, const std::vector<double>& budgets,
                      const std::vector<std::string>& methods, std::size_t repetitions);

inline const std::vector<std::string> kBenchMethods = {"lop", "mcts", "magnitude", "wanda", "uniform", "random"};

// Runs every stage in order with the manifest's settings.
void run_all(const std::filesystem::path& dir, const RunManifest& manifest, const std::vector<double>& bench_budgets,
             std::size_t repetitions);

// Loads the model and data splits after checking their fingerprints.
RunState load_run(const std::filesystem::path& dir);
importance::ImportanceTable load_importance(const std::filesystem::path& dir, const RunState& run);

}  // namespace lop::pipeline
