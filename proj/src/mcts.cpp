#include "lop/mcts.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lop::search {

namespace {

double round12(double v) { return std::round(v * 1e12) / 1e12; }

std::string fnv_hex(const std::string& text) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(text);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

void check_budget_value(double b) {
    if (!std::isfinite(b)) throw std::invalid_argument("constraint: b must be finite");
    if (b < kThetaMin) {
        std::ostringstream msg;
        msg << "constraint: b = " << b << " is below the smallest ratio " << kThetaMin
            << "; no configuration is valid";
        throw std::invalid_argument(msg.str());
    }
}

}  // namespace

double budget_from_total(double total_pruned, std::span<const std::size_t> widths) {
    const double total = static_cast<double>(std::accumulate(widths.begin(), widths.end(), std::size_t{0}));
    if (total == 0.0) throw std::invalid_argument("budget_from_total: no neurons");
    if (total_pruned < 0.0) throw std::invalid_argument("budget_from_total: negative budget");
    return total_pruned / total;
}

bool check_valid(const PruningConfig& config, const ConstraintSpec& constraint) {
    return config.mean() <= constraint.b + kValidTolerance;
}

double perturbation_scale(std::size_t depth) { return 0.1 * std::pow(0.9, static_cast<double>(depth)); }

double clip_ratio(double theta) { return std::clamp(theta, kThetaMin, kThetaMax); }

double snap_to_grid(double theta, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("snap_to_grid: step must be positive");
    const double k = std::round((theta - kThetaMin) / step);
    return clip_ratio(round12(kThetaMin + k * step));
}

std::vector<double> grid_values(double start, double stop, double step) {
    if (!(step > 0.0) || !std::isfinite(start) || !std::isfinite(stop))
        throw std::invalid_argument("grid: step must be positive and bounds finite");
    if (stop < start) throw std::invalid_argument("grid: stop is below start");
    const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k) out[k] = round12(start + static_cast<double>(k) * step);
    return out;
}

void SearchBudget::validate() const {
    if (simulations == 0) throw std::invalid_argument("search budget: simulations must be >= 1");
    if (eval_cap == 0) throw std::invalid_argument("search budget: eval cap must be >= 1");
    if (max_children == 0) throw std::invalid_argument("search budget: max children must be >= 1");
    if (!(exploration >= 0.0) || !std::isfinite(exploration))
        throw std::invalid_argument("search budget: exploration constant must be finite and >= 0");
    if (!(grid_step >= 0.0) || grid_step > kThetaMax - kThetaMin)
        throw std::invalid_argument("search budget: grid step must lie in [0, 0.9]");
}

SearchTree::SearchTree(PruningConfig root_config) {
    SearchNode root;
    root.config = std::move(root_config);
    nodes_.push_back(std::move(root));
}

std::size_t SearchTree::add_child(std::size_t parent, PruningConfig config) {
    SearchNode child;
    child.config = std::move(config);
    child.depth = nodes_.at(parent).depth + 1;
    child.parent = parent;
    nodes_.push_back(std::move(child));
    const std::size_t id = nodes_.size() - 1;
    nodes_[parent].children.push_back(id);
    return id;
}

std::size_t ucb_select(const SearchTree& tree, std::size_t node, double exploration) {
    const SearchNode& s = tree.node(node);
    if (s.children.empty()) throw std::logic_error("ucb_select: node has no children");
    const double log_n = std::log(static_cast<double>(std::max<std::size_t>(s.visits, 1)));
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s.children.size(); ++i) {
        const SearchNode& c = tree.node(s.children[i]);
        if (c.edge_visits == 0) return i;
        const double score = c.q() + exploration * std::sqrt(log_n / static_cast<double>(c.edge_visits));
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

std::size_t expand(SearchTree& tree, std::size_t node, Rng& rng, const SearchBudget& budget) {
    const SearchNode& parent = tree.node(node);
    if (parent.children.size() >= budget.max_children)
        throw std::logic_error("expand: node " + std::to_string(node) + " is already fully expanded");
    const double delta = perturbation_scale(parent.depth);
    PruningConfig child = parent.config;
    for (double& t : child.theta) {
        t = clip_ratio(t + rng.uniform(-delta, delta));
        if (budget.grid_step > 0.0) t = snap_to_grid(t, budget.grid_step);
    }
    return tree.add_child(node, std::move(child));
}

void backpropagate(SearchTree& tree, std::span<const std::size_t> path, double reward) {
    for (std::size_t i = 0; i < path.size(); ++i) {
        SearchNode& n = tree.node(path[i]);
        n.visits += 1;
        if (i > 0) {
            n.edge_visits += 1;
            n.edge_reward += reward;
        }
    }
}

double evaluate_config(const PruningConfig& config, const model::TargetModel& model,
                       const importance::ImportanceTable& table, const model::CalibrationSet& eval_set) {
    const auto masks = importance::config_to_masks(config, table, model.spec().hidden_widths);
    return model::evaluate(model, masks, eval_set).accuracy;
}

RewardCache::RewardCache(const model::TargetModel& model, const importance::ImportanceTable& table,
                         const model::CalibrationSet& eval_set)
    : fn_([&model, &table, &eval_set](const PruningConfig& c) { return evaluate_config(c, model, table, eval_set); }) {}

double RewardCache::operator()(const PruningConfig& config) {
    if (auto it = memo_.find(config.theta); it != memo_.end()) {
        ++hits_;
        return it->second;
    }
    const double r = fn_(config);
    memo_.emplace(config.theta, r);
    ++evaluations_;
    return r;
}

SearchResult run_search(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                        const SearchBudget& budget) {
    budget.validate();
    check_budget_value(constraint.b);
    if (layers == 0) throw std::invalid_argument("search: model has no layers");

    const auto start = std::chrono::steady_clock::now();
    const std::size_t base_evals = rewards.evaluations();
    Rng rng(stream_seed(budget.seed, "search"));

    double root_theta = clip_ratio(constraint.b);
    if (budget.grid_step > 0.0) {
        // Round down so the root stays within the budget.
        const double k = std::floor((root_theta - kThetaMin) / budget.grid_step + 1e-9);
        root_theta = clip_ratio(round12(kThetaMin + k * budget.grid_step));
    }

    SearchResult result;
    result.tree = SearchTree(PruningConfig{std::vector<double>(layers, root_theta)});
    SearchTree& tree = result.tree;

    auto score = [&](SearchNode& n) {
        n.valid = check_valid(n.config, constraint);
        n.reward = n.valid ? rewards(n.config) : 0.0;
        result.evaluated.push_back({n.config, *n.reward, n.valid});
        return *n.reward;
    };

    score(tree.node(0));
    tree.node(0).visits = 1;

    std::vector<std::size_t> path;
    for (std::size_t t = 0; t < budget.simulations; ++t) {
        if (rewards.evaluations() - base_evals >= budget.eval_cap) break;
        path.assign(1, 0);
        std::size_t node = 0;
        while (tree.node(node).children.size() >= budget.max_children) {
            node = tree.node(node).children[ucb_select(tree, node, budget.exploration)];
            path.push_back(node);
        }
        const std::size_t child = expand(tree, node, rng, budget);
        const double r = score(tree.node(child));
        path.push_back(child);
        backpropagate(tree, path, r);
        ++result.simulations_run;
    }

    bool found = false;
    for (const auto& e : result.evaluated) {
        if (e.valid && (!found || e.reward > result.best_reward)) {
            result.best = e.config;
            result.best_reward = e.reward;
            found = true;
        }
    }
    // The root is always valid once b >= 0.1.
    if (!found) throw std::logic_error("search: no valid configuration was evaluated");

    result.model_evaluations = rewards.evaluations() - base_evals;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

SearchResult run_search(const model::TargetModel& model, const importance::ImportanceTable& table,
                        const model::CalibrationSet& eval_set, const ConstraintSpec& constraint,
                        const SearchBudget& budget) {
    RewardCache rewards(model, table, eval_set);
    return run_search(rewards, model.layers(), constraint, budget);
}

BestConfig brute_force_oracle(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                              double grid_step) {
    check_budget_value(constraint.b);
    if (layers == 0) throw std::invalid_argument("oracle: no layers");
    const auto values = grid_values(kThetaMin, kThetaMax, grid_step);
    double total = std::pow(static_cast<double>(values.size()), static_cast<double>(layers));
    if (total > 1e6) throw std::invalid_argument("oracle: grid has more than 1e6 configurations");

    BestConfig best;
    bool found = false;
    std::vector<std::size_t> idx(layers, 0);
    PruningConfig config{std::vector<double>(layers)};
    const std::size_t before = rewards.evaluations();
    while (true) {
        for (std::size_t l = 0; l < layers; ++l) config.theta[l] = values[idx[l]];
        if (check_valid(config, constraint)) {
            const double r = rewards(config);
            if (!found || r > best.reward) {
                best.config = config;
                best.reward = r;
                found = true;
            }
        }
        std::size_t l = layers;
        while (l > 0) {
            --l;
            if (++idx[l] < values.size()) break;
            idx[l] = 0;
            if (l == 0) {
                best.evaluations = rewards.evaluations() - before;
                return best;
            }
        }
    }
}

BestConfig random_search_baseline(RewardCache& rewards, std::size_t layers, const ConstraintSpec& constraint,
                                  std::size_t samples, std::uint64_t seed) {
    check_budget_value(constraint.b);
    if (layers == 0 || samples == 0) throw std::invalid_argument("random search: layers and samples must be >= 1");
    const double hi = std::min(kThetaMax, 2.0 * constraint.b - kThetaMin);
    Rng rng(stream_seed(seed, "random-search"));
    const std::size_t max_attempts = samples * 1000;
    std::size_t attempts = 0;
    std::size_t accepted = 0;
    BestConfig best;
    const std::size_t before = rewards.evaluations();
    PruningConfig config{std::vector<double>(layers)};
    while (accepted < samples) {
        if (attempts >= max_attempts) {
            throw std::runtime_error("random search: rejection rate above 99.9% (" + std::to_string(accepted) +
                                     " of " + std::to_string(attempts) + " samples valid)");
        }
        ++attempts;
        for (double& t : config.theta) t = rng.uniform(kThetaMin, hi);
        if (!check_valid(config, constraint)) continue;
        const double r = rewards(config);
        if (accepted == 0 || r > best.reward) {
            best.config = config;
            best.reward = r;
        }
        ++accepted;
    }
    best.evaluations = rewards.evaluations() - before;
    return best;
}

nlohmann::json Dataset::to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& s : samples) items.push_back({{"b", s.b}, {"theta", s.theta}, {"reward", s.reward}});
    return {{"model_fingerprint", model_fingerprint}, {"metric", metric}, {"samples", items}};
}

Dataset Dataset::from_json(const nlohmann::json& doc) {
    Dataset d;
    d.model_fingerprint = doc.at("model_fingerprint").get<std::string>();
    d.metric = doc.at("metric").get<std::string>();
    std::size_t layers = 0;
    for (const auto& item : doc.at("samples")) {
        TrainingSample s;
        s.b = item.at("b").get<double>();
        s.theta = item.at("theta").get<std::vector<double>>();
        s.reward = item.value("reward", 0.0);
        if (s.theta.empty()) throw std::invalid_argument("dataset: sample with empty theta");
        if (layers == 0) layers = s.theta.size();
        if (s.theta.size() != layers) throw std::invalid_argument("dataset: samples disagree on layer count");
        for (double t : s.theta)
            if (!(t >= kThetaMin - 1e-12 && t <= kThetaMax + 1e-12))
                throw std::invalid_argument("dataset: ratio outside [0.1, 1.0]");
        d.samples.push_back(std::move(s));
    }
    if (d.samples.empty()) throw std::invalid_argument("dataset: no samples");
    return d;
}

std::string Dataset::fingerprint() const { return fnv_hex(to_json().dump()); }

std::vector<TrainingSample> generate_dataset(const model::TargetModel& model,
                                             const importance::ImportanceTable& table,
                                             const model::CalibrationSet& eval_set, std::span<const double> b_grid,
                                             const SearchBudget& budget) {
    if (b_grid.empty()) throw std::invalid_argument("dataset: empty budget grid");
    std::vector<double> grid(b_grid.begin(), b_grid.end());
    std::sort(grid.begin(), grid.end());
    // Rewards depend only on the configuration, so one cache serves every budget.
    RewardCache shared(model, table, eval_set);
    std::vector<TrainingSample> out;
    for (double b : grid) {
        RewardCache per_budget([&shared](const PruningConfig& c) { return shared(c); });
        const auto r = run_search(per_budget, model.layers(), ConstraintSpec{b}, budget);
        out.push_back({b, r.best.theta, r.best_reward});
    }
    return out;
}

std::string search_trace_jsonl(const SearchResult& result) {
    std::string out;
    for (std::size_t i = 0; i < result.evaluated.size(); ++i) {
        const auto& e = result.evaluated[i];
        nlohmann::json line = {{"step", i}, {"theta", e.config.theta}, {"reward", e.reward}, {"valid", e.valid}};
        out += line.dump();
        out += '\n';
    }
    return out;
}

}  // namespace lop::search
