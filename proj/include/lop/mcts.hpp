#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lop/importance.hpp"
#include "lop/random.hpp"
#include "lop/target_model.hpp"

namespace lop::search {

inline constexpr double kThetaMin = 0.1;
inline constexpr double kThetaMax = 1.0;
inline constexpr double kValidTolerance = 1e-12;

// Global budget: the mean pruning ratio may not exceed b.
struct ConstraintSpec {
    double b = 0.5;
};

// b for a total pruned-neuron budget B_total when every layer shares width d:
// b = B_total / (L * d). Mixed widths use the neuron-weighted mean instead.
double budget_from_total(double total_pruned, std::span<const std::size_t> widths);

// mean(theta) <= b + 1e-12. Throws on an empty config.
bool check_valid(const PruningConfig& config, const ConstraintSpec& constraint);

// Perturbation half-width at a tree depth: 0.1 * 0.9^depth.
double perturbation_scale(std::size_t depth);

double clip_ratio(double theta);
// Nearest point of the grid {0.1, 0.1 + step, ...}, rounded to 12 decimals so that
// grid values compare equal to their decimal literals.
double snap_to_grid(double theta, double step);
// Inclusive start:stop:step sequence with the same rounding.
std::vector<double> grid_values(double start, double stop, double step);

struct SearchBudget {
    std::size_t simulations = 300;
    std::size_t eval_cap = 200;
    std::size_t max_children = 5;
    double exploration = 1.4142135623730951;
    std::uint64_t seed = 0;
    // 0 searches the continuous box; a positive step snaps every child to that grid.
    double grid_step = 0.0;

    void validate() const;
};

struct SearchNode {
    PruningConfig config;
    std::size_t depth = 0;
    std::optional<std::size_t> parent;
    std::vector<std::size_t> children;
    std::size_t visits = 0;        // N(s)
    std::size_t edge_visits = 0;   // N(parent, s)
    double edge_reward = 0.0;      // W(parent, s)
    std::optional<double> reward;  // V(s)
    bool valid = false;

    double q() const { return edge_visits == 0 ? 0.0 : edge_reward / static_cast<double>(edge_visits); }
};

// Arena of nodes; index 0 is the root. Children are perturbed copies of their
// parent's complete configuration.
class SearchTree {
public:
    explicit SearchTree(PruningConfig root_config);

    SearchNode& node(std::size_t i) { return nodes_.at(i); }
    const SearchNode& node(std::size_t i) const { return nodes_.at(i); }
    std::size_t size() const { return nodes_.size(); }
    std::size_t add_child(std::size_t parent, PruningConfig config);

private:
    std::vector<SearchNode> nodes_;
};

// Position in node.children maximizing Q + c * sqrt(ln N(s) / N(s, a)). Children
// never visited rank first; ties go to the lowest position.
std::size_t ucb_select(const SearchTree& tree, std::size_t node, double exploration);

// Appends a child whose ratios are clip(theta_k + U(-delta, delta)), delta taken at
// the parent's depth. Throws std::logic_error when the node already has
// max_children children.
std::size_t expand(SearchTree& tree, std::size_t node, Rng& rng, const SearchBudget& budget);

// Adds one visit to every node on the root-to-leaf path and (1, reward) to
// every edge on it.
void backpropagate(SearchTree& tree, std::span<const std::size_t> path, double reward);

// Reward of a configuration on a fixed model: validation accuracy after masking.
double evaluate_config(const PruningConfig& config, const model::TargetModel& model,
                       const importance::ImportanceTable& table, const model::CalibrationSet& eval_set);

using RewardFn = std::function<double(const PruningConfig&)>;

// Memoizes rewards by exact configuration. Only cache misses count as evaluations.
class RewardCache {
public:
    explicit RewardCache(RewardFn fn) : fn_(std::move(fn)) {}
    RewardCache(const model::TargetModel& model, const importance::ImportanceTable& table,
                const model::CalibrationSet& eval_set);

    double operator()(const PruningConfig& config);
    bool contains(const PruningConfig& config) const { return memo_.count(config.theta) != 0; }
    std::size_t evaluations() const { return evaluations_; }
    std::size_t hits() const { return hits_; }

private:
    RewardFn fn_;
    std::map<std::vector<double>, double> memo_;
    std::size_t evaluations_ = 0;
    std::size_t hits_ = 0;
};

struct EvaluatedConfig {
    PruningConfig config;
    double reward = 0.0;
    bool valid = false;
};

struct SearchResult {
    PruningConfig best;
    double best_reward = 0.0;
    std::vector<EvaluatedConfig> evaluated;
    std::size_t simulations_run = 0;
    std::size_t model_evaluations = 0;
    double seconds = 0.0;
    SearchTree tree{PruningConfig{}};
};

// Selection, expansion, evaluation, and backpropagation, repeated for the
// simulation budget or until eval_cap distinct configurations have been
// evaluated. Invalid children are not evaluated; they score 0.
SearchResult run_search(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                        const SearchBudget& budget);
SearchResult run_search(const model::TargetModel& model, const importance::ImportanceTable& table,
                        const model::CalibrationSet& eval_set, const ConstraintSpec& constraint,
                        const SearchBudget& budget);

struct BestConfig {
    PruningConfig config;
    double reward = 0.0;
    std::size_t evaluations = 0;
};

// Exhaustive search over the grid {0.1, 0.1 + step, ..., 1.0}^L. Ties go to the
// lexicographically smallest configuration.
BestConfig brute_force_oracle(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                              double grid_step);

// Uniform samples from [0.1, hi]^L with hi = min(1, 2b - 0.1), rejected until valid.
BestConfig random_search_baseline(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                                  std::size_t samples, std::uint64_t seed);

struct TrainingSample {
    double b = 0.0;
    std::vector<double> theta;
    double reward = 0.0;
};

struct Dataset {
    std::string model_fingerprint;
    std::string metric;
    std::vector<TrainingSample> samples;

    // {"model_fingerprint", "metric", "samples": [{"b", "theta", "reward"}]}
    nlohmann::json to_json() const;
    static Dataset from_json(const nlohmann::json& doc);
    std::string fingerprint() const;
};

// One search per budget; samples come back sorted by b. Every budget's search
// uses budget.seed, so the perturbation draws are shared across budgets.
std::vector<TrainingSample> generate_dataset(const model::TargetModel& model,
                                             const importance::ImportanceTable& table,
                                             const model::CalibrationSet& eval_set, std::span<const double> b_grid,
                                             const SearchBudget& budget);

// One JSON object per evaluated configuration.
std::string search_trace_jsonl(const SearchResult& result);

}  // namespace lop::search
