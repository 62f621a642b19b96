#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lop/mcts.hpp"

using namespace lop;
using namespace lop::search;

namespace {

// Smooth toy reward: prefers pruning late layers over early ones.
double toy_reward(const PruningConfig& c) {
    double r = 1.0;
    for (std::size_t l = 0; l < c.size(); ++l) r -= 0.3 * c.theta[l] * c.theta[l] / static_cast<double>(l + 1);
    return std::clamp(r, 0.0, 1.0);
}

bool in_box(const PruningConfig& c) {
    return std::all_of(c.theta.begin(), c.theta.end(), [](double t) { return t >= kThetaMin && t <= kThetaMax; });
}

struct SmallProblem {
    model::TargetModel model = model::build_model(model::TargetModelSpec::uniform(3, 16), 11);
    model::CalibrationSet data = model::make_blobs({}, 120, 12);
    importance::ImportanceTable table;

    SmallProblem() {
        model::pretrain(model, data, {5, 32, 1e-2, 13});
        table = importance::compute_importance(model, data, importance::Metric::activation_l2);
    }
};

}  // namespace

TEST_CASE("ucb prefers the higher mean at equal visits") {
    SearchTree tree(PruningConfig{{0.5}});
    const auto a = tree.add_child(0, PruningConfig{{0.4}});
    const auto b = tree.add_child(0, PruningConfig{{0.6}});
    tree.node(0).visits = 3;
    tree.node(a).edge_visits = 1;
    tree.node(a).edge_reward = 0.8;
    tree.node(b).edge_visits = 1;
    tree.node(b).edge_reward = 0.4;
    CHECK(ucb_select(tree, 0, std::sqrt(2.0)) == 0);
}

TEST_CASE("ucb picks unvisited children first") {
    SearchTree tree(PruningConfig{{0.5}});
    const auto a = tree.add_child(0, PruningConfig{{0.4}});
    tree.add_child(0, PruningConfig{{0.6}});
    tree.node(0).visits = 10;
    tree.node(a).edge_visits = 9;
    tree.node(a).edge_reward = 9.0;
    CHECK(ucb_select(tree, 0, 1.0) == 1);
}

TEST_CASE("zero exploration is greedy and large exploration favours rare children") {
    SearchTree tree(PruningConfig{{0.5}});
    const auto a = tree.add_child(0, PruningConfig{{0.4}});
    const auto b = tree.add_child(0, PruningConfig{{0.6}});
    tree.node(0).visits = 21;
    tree.node(a).edge_visits = 19;
    tree.node(a).edge_reward = 19 * 0.6;
    tree.node(b).edge_visits = 1;
    tree.node(b).edge_reward = 0.5;
    CHECK(ucb_select(tree, 0, 0.0) == 0);
    CHECK(ucb_select(tree, 0, 10.0) == 1);
    CHECK_THROWS_AS(ucb_select(tree, a, 1.0), std::logic_error);
}

TEST_CASE("perturbation scale shrinks with depth") {
    CHECK(perturbation_scale(0) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(perturbation_scale(1) == doctest::Approx(0.09).epsilon(1e-15));
    CHECK(perturbation_scale(2) == doctest::Approx(0.081).epsilon(1e-15));
    for (std::size_t d = 0; d < 50; ++d) CHECK(perturbation_scale(d + 1) < perturbation_scale(d));
}

TEST_CASE("clipping and grid snapping") {
    CHECK(clip_ratio(0.12 - 0.05) == 0.1);
    CHECK(clip_ratio(1.3) == 1.0);
    CHECK(clip_ratio(0.55) == 0.55);
    CHECK(snap_to_grid(0.34, 0.1) == 0.3);
    CHECK(snap_to_grid(0.36, 0.1) == 0.4);
    CHECK(snap_to_grid(0.97, 0.1) == 1.0);
    CHECK(snap_to_grid(0.0, 0.1) == 0.1);
    CHECK_THROWS_AS(snap_to_grid(0.5, 0.0), std::invalid_argument);
    const auto g = grid_values(0.1, 1.0, 0.1);
    REQUIRE(g.size() == 10);
    CHECK(g.front() == 0.1);
    CHECK(g[2] == 0.3);
    CHECK(g.back() == 1.0);
    CHECK(grid_values(0.1, 0.7, 0.025).size() == 25);
    CHECK_THROWS_AS(grid_values(0.5, 0.1, 0.1), std::invalid_argument);
}

TEST_CASE("expand perturbs within the depth scale and stays in the box") {
    SearchBudget budget;
    budget.max_children = 1000;
    SearchTree tree(PruningConfig{{0.1, 0.5, 1.0}});
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        const auto c = expand(tree, 0, rng, budget);
        const auto& child = tree.node(c);
        CHECK(child.depth == 1);
        CHECK(in_box(child.config));
        CHECK(std::abs(child.config.theta[1] - 0.5) <= 0.1);
    }
    budget.max_children = 500;
    CHECK_THROWS_AS(expand(tree, 0, rng, budget), std::logic_error);
}

TEST_CASE("check_valid examples") {
    CHECK(check_valid(PruningConfig{{0.2, 0.4}}, {0.3}));
    CHECK_FALSE(check_valid(PruningConfig{{0.2, 0.5}}, {0.3}));
    CHECK(check_valid(PruningConfig{{0.3, 0.3, 0.3}}, {0.3}));
    CHECK(check_valid(PruningConfig{{0.1, 0.2}}, {0.15}));
    CHECK_THROWS(check_valid(PruningConfig{}, {0.3}));
}

TEST_CASE("budget_from_total") {
    const std::size_t w[] = {64, 64, 64, 64, 64, 64};
    CHECK(budget_from_total(192.0, w) == doctest::Approx(0.5));
    const std::size_t none[] = {0};
    CHECK_THROWS_AS(budget_from_total(1.0, none), std::invalid_argument);
}

TEST_CASE("backpropagate accumulates edge statistics") {
    SearchTree tree(PruningConfig{{0.5}});
    const auto c = tree.add_child(0, PruningConfig{{0.4}});
    const std::size_t path[] = {0, c};
    backpropagate(tree, path, 0.7);
    CHECK(tree.node(c).q() == doctest::Approx(0.7));
    CHECK(tree.node(c).edge_visits == 1);
    backpropagate(tree, path, 0.5);
    backpropagate(tree, path, 0.9);
    CHECK(tree.node(c).edge_visits == 3);
    CHECK(tree.node(c).q() == doctest::Approx((0.7 + 0.5 + 0.9) / 3.0));
    CHECK(tree.node(0).visits == 3);
    CHECK(tree.node(0).edge_visits == 0);
}

TEST_CASE("search trees satisfy the visit-count invariant") {
    for (double b : {0.2, 0.35, 0.5, 0.8}) {
        RewardCache rewards(toy_reward);
        SearchBudget budget;
        budget.simulations = 150;
        budget.max_children = 3;
        budget.seed = 5;
        const auto r = run_search(rewards, 4, {b}, budget);
        const auto& tree = r.tree;
        CHECK(tree.size() == r.simulations_run + 1);
        for (std::size_t i = 0; i < tree.size(); ++i) {
            const auto& n = tree.node(i);
            std::size_t child_visits = 0;
            for (auto c : n.children) child_visits += tree.node(c).edge_visits;
            CHECK(n.visits == child_visits + 1);
            CHECK(n.children.size() <= budget.max_children);
            CHECK(in_box(n.config));
            if (i > 0) {
                CHECK(n.edge_visits == n.visits);
                CHECK(n.q() >= 0.0);
                CHECK(n.q() <= 1.0);
                CHECK(n.depth == tree.node(*n.parent).depth + 1);
            }
        }
    }
}

TEST_CASE("a single simulation expands the root once") {
    RewardCache rewards(toy_reward);
    SearchBudget budget;
    budget.simulations = 1;
    const auto r = run_search(rewards, 3, {0.4}, budget);
    CHECK(r.simulations_run == 1);
    CHECK(r.tree.size() == 2);
    CHECK(r.tree.node(0).children.size() == 1);
    CHECK(r.evaluated.size() == 2);
}

TEST_CASE("the returned configuration is valid, in the box, and the best valid one evaluated") {
    for (double b = 0.1; b <= 0.9 + 1e-9; b += 0.1) {
        RewardCache rewards(toy_reward);
        SearchBudget budget;
        budget.simulations = 80;
        budget.seed = 2;
        const auto r = run_search(rewards, 6, {b}, budget);
        CHECK(check_valid(r.best, {b}));
        CHECK(in_box(r.best));
        CHECK(r.best_reward == toy_reward(r.best));
        for (const auto& e : r.evaluated) {
            if (e.valid) CHECK(e.reward <= r.best_reward);
            else CHECK(e.reward == 0.0);
        }
    }
}

TEST_CASE("the evaluation cap stops the search") {
    RewardCache rewards(toy_reward);
    SearchBudget budget;
    budget.simulations = 300;
    budget.eval_cap = 20;
    const auto r = run_search(rewards, 6, {0.5}, budget);
    CHECK(r.model_evaluations == 20);
    CHECK(rewards.evaluations() == 20);
    CHECK(r.simulations_run < 300);
}

TEST_CASE("search is deterministic for a seed and varies with it") {
    auto run = [](std::uint64_t seed) {
        RewardCache rewards(toy_reward);
        SearchBudget budget;
        budget.simulations = 60;
        budget.seed = seed;
        return run_search(rewards, 5, {0.4}, budget);
    };
    const auto a = run(9), b = run(9), c = run(10);
    CHECK(a.best == b.best);
    CHECK(search_trace_jsonl(a) == search_trace_jsonl(b));
    CHECK(search_trace_jsonl(a) != search_trace_jsonl(c));
}

TEST_CASE("budgets below the smallest ratio are rejected") {
    RewardCache rewards(toy_reward);
    CHECK_THROWS_AS(run_search(rewards, 3, {0.05}, SearchBudget{}), std::invalid_argument);
    CHECK_THROWS_AS(brute_force_oracle(rewards, 3, {0.05}, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(random_search_baseline(rewards, 3, {0.05}, 10, 0), std::invalid_argument);
    SearchBudget bad;
    bad.simulations = 0;
    CHECK_THROWS_AS(run_search(rewards, 3, {0.5}, bad), std::invalid_argument);
}

TEST_CASE("rewards are memoized") {
    int calls = 0;
    RewardCache rewards([&calls](const PruningConfig& c) {
        ++calls;
        return toy_reward(c);
    });
    const PruningConfig c{{0.3, 0.4}};
    const double r1 = rewards(c);
    const double r2 = rewards(c);
    CHECK(r1 == r2);
    CHECK(calls == 1);
    CHECK(rewards.evaluations() == 1);
    CHECK(rewards.hits() == 1);
    CHECK(rewards.contains(c));
    CHECK_FALSE(rewards.contains(PruningConfig{{0.3, 0.5}}));
}

TEST_CASE("the oracle finds the known optimum of a one-layer monotone reward") {
    RewardCache rewards([](const PruningConfig& c) { return 1.0 - c.theta[0]; });
    const auto best = brute_force_oracle(rewards, 1, {0.55}, 0.1);
    CHECK(best.config.theta == std::vector<double>{0.1});
    CHECK(best.evaluations == 5);

    // Higher pruning is better here, so the oracle goes to the budget edge.
    RewardCache up([](const PruningConfig& c) { return c.theta[0]; });
    CHECK(brute_force_oracle(up, 1, {0.55}, 0.1).config.theta == std::vector<double>{0.5});
}

TEST_CASE("the oracle breaks ties toward the lexicographically smallest configuration") {
    RewardCache flat([](const PruningConfig&) { return 0.5; });
    const auto best = brute_force_oracle(flat, 2, {0.5}, 0.1);
    CHECK(best.config.theta == std::vector<double>{0.1, 0.1});
}

TEST_CASE("the oracle dominates grid-mode search on a small model") {
    SmallProblem p;
    for (double b : {0.2, 0.4, 0.6}) {
        RewardCache rewards(p.model, p.table, p.data);
        const auto oracle = brute_force_oracle(rewards, 3, {b}, 0.1);
        SearchBudget budget;
        budget.simulations = 100;
        budget.grid_step = 0.1;
        const auto r = run_search(rewards, 3, {b}, budget);
        CHECK(oracle.reward >= r.best_reward);
        CHECK(check_valid(oracle.config, {b}));
        for (const auto& e : r.evaluated) {
            for (double t : e.config.theta) CHECK(t == snap_to_grid(t, 0.1));
        }
    }
}

TEST_CASE("random search is reproducible and valid") {
    RewardCache r1(toy_reward), r2(toy_reward);
    const auto a = random_search_baseline(r1, 6, {0.3}, 50, 4);
    const auto b = random_search_baseline(r2, 6, {0.3}, 50, 4);
    CHECK(a.config == b.config);
    CHECK(a.reward == b.reward);
    CHECK(a.evaluations == 50);
    CHECK(check_valid(a.config, {0.3}));
    CHECK(in_box(a.config));
    CHECK_THROWS_AS(random_search_baseline(r1, 6, {0.3}, 0, 4), std::invalid_argument);
}

TEST_CASE("dataset generation sorts budgets and returns valid labels") {
    SmallProblem p;
    SearchBudget budget;
    budget.simulations = 30;
    const double grid[] = {0.5, 0.2, 0.3};
    const auto samples = generate_dataset(p.model, p.table, p.data, grid, budget);
    REQUIRE(samples.size() == 3);
    CHECK(samples[0].b == 0.2);
    CHECK(samples[1].b == 0.3);
    CHECK(samples[2].b == 0.5);
    for (const auto& s : samples) {
        CHECK(check_valid(PruningConfig{s.theta}, {s.b}));
        CHECK(s.reward == evaluate_config(PruningConfig{s.theta}, p.model, p.table, p.data));
        // Each label equals what a standalone search at that budget returns.
        const auto solo = run_search(p.model, p.table, p.data, {s.b}, budget);
        CHECK(solo.best.theta == s.theta);
    }
}

TEST_CASE("dataset JSON round trip and validation") {
    Dataset d;
    d.model_fingerprint = "abc";
    d.metric = "activation-l2";
    d.samples = {{0.2, {0.1, 0.3}, 0.9}, {0.4, {0.5, 0.3}, 0.7}};
    const auto back = Dataset::from_json(nlohmann::json::parse(d.to_json().dump()));
    CHECK(back.samples.size() == 2);
    CHECK(back.samples[1].theta == d.samples[1].theta);
    CHECK(back.fingerprint() == d.fingerprint());
    auto bad = d.to_json();
    bad["samples"][0]["theta"] = {0.05, 0.3};
    CHECK_THROWS_AS(Dataset::from_json(bad), std::invalid_argument);
    bad["samples"][0]["theta"] = {0.2};
    CHECK_THROWS_AS(Dataset::from_json(bad), std::invalid_argument);
}
