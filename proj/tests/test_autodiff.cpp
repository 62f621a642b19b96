#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "lop/autodiff.hpp"
#include "op_builders.hpp"
#include "test_support.hpp"

using namespace lop;
using namespace lop::ad;
using lop::testing::random_matrix;
using lop::testing::random_matrix_off_zero;
using lop::testing::op_builders;

TEST_CASE("matmul with identity returns the left operand") {
    Graph g;
    auto a = g.input(Matrix{{1, 2}, {3, 4}});
    auto i = g.input(Matrix::identity(2));
    auto c = g.matmul(a, i);
    CHECK(g.forward(c) == Matrix{{1, 2}, {3, 4}});
}

TEST_CASE("sigmoid of zero is one half") {
    Graph g;
    auto s = g.activation(g.input(Matrix::scalar(0.0)), Activation::sigmoid);
    CHECK(g.forward(s)(0, 0) == 0.5);
}

TEST_CASE("layer norm of a constant row is all zeros") {
    Graph g;
    auto y = g.layer_norm(g.input(Matrix(1, 5, 3.25)));
    const Matrix& out = g.forward(y);
    for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("shape mismatch names both nodes and shapes") {
    Graph g;
    auto a = g.input(Matrix(2, 3));
    auto b = g.input(Matrix(2, 3));
    auto c = g.matmul(a, b);
    try {
        g.forward(c);
        FAIL("expected GraphError");
    } catch (const GraphError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("node 0 2x3") != std::string::npos);
        CHECK(msg.find("node 1 2x3") != std::string::npos);
        CHECK(e.nodes() == std::vector<std::size_t>{2, 0, 1});
    }
}

TEST_CASE("forward is bit-deterministic") {
    Rng rng(7);
    ParameterStore ps;
    auto w = ps.add("w", random_matrix(rng, 6, 6));
    auto build = [&](Graph& g) {
        Rng data(3);
        auto x = g.input(random_matrix(data, 4, 6));
        auto h = g.activation(g.matmul(x, g.parameter(w)), Activation::gelu);
        return g.layer_norm(h);
    };
    Graph g1(&ps), g2(&ps);
    auto r1 = build(g1);
    auto r2 = build(g2);
    CHECK(g1.forward(r1) == g2.forward(r2));
    CHECK(g1.forward(r1) == g1.forward(r1));
}

TEST_CASE("mse gradient vanishes at its minimum") {
    ParameterStore ps;
    auto x = ps.add("x", Matrix::scalar(3.0));
    Graph g(&ps);
    auto loss = g.mse(g.parameter(x), g.input(Matrix::scalar(3.0)));
    g.forward(loss);
    g.backward(loss);
    CHECK(ps[x].grad(0, 0) == 0.0);
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
    ParameterStore ps;
    auto x = ps.add("x", Matrix::scalar(0.0));
    Graph g(&ps);
    auto s = g.activation(g.parameter(x), Activation::sigmoid);
    auto loss = g.mse(s, g.input(Matrix::scalar(0.0)));
    g.forward(loss);
    g.backward(loss, true);
    // dL/ds = 2 * 0.5 = 1, so dL/dx = sigma'(0).
    CHECK(g.grad(s)(0, 0) == doctest::Approx(1.0));
    CHECK(ps[x].grad(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward errors") {
    ParameterStore ps;
    auto w = ps.add("w", Matrix(2, 2, 1.0));
    Graph g(&ps);
    auto m = g.matmul(g.parameter(w), g.input(Matrix(2, 1, 1.0)));
    SUBCASE("before forward") { CHECK_THROWS_AS(g.backward(m), GraphError); }
    SUBCASE("non-scalar root") {
        g.forward(m);
        CHECK_THROWS_AS(g.backward(m), GraphError);
    }
}

TEST_CASE("matmul chain matches central finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        ParameterStore ps;
        auto a = ps.add("a", random_matrix(rng, 4, 4));
        auto b = ps.add("b", random_matrix(rng, 4, 4));
        auto c = ps.add("c", random_matrix(rng, 4, 4));
        Graph g(&ps);
        auto prod = g.matmul(g.matmul(g.parameter(a), g.parameter(b)), g.parameter(c));
        auto loss = g.mse(prod, g.input(random_matrix(rng, 4, 4)));
        auto ids = ps.ids();
        auto report = grad_check(g, loss, ps, ids);
        CHECK(report.max_relative_error() <= 1e-4);
    }
}

TEST_CASE("grad_check: linear model y = w x under mse") {
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        ParameterStore ps;
        auto w = ps.add("w", Matrix::scalar(rng.uniform(-3.0, 3.0)));
        const double x = rng.uniform(-2.0, 2.0), t = rng.uniform(-2.0, 2.0);
        Graph g(&ps);
        auto loss = g.mse(g.matmul(g.parameter(w), g.input(Matrix::scalar(x))), g.input(Matrix::scalar(t)));
        g.forward(loss);
        g.backward(loss);
        const double wv = ps[w].value(0, 0);
        CHECK(ps[w].grad(0, 0) == doctest::Approx(2.0 * (wv * x - t) * x).epsilon(1e-12));
        std::vector<ParamId> ids{w};
        CHECK(grad_check(g, loss, ps, ids).max_relative_error() <= 1e-6);
    }
}

TEST_CASE("grad_check: two-layer relu MLP head") {
    Rng rng(5);
    ParameterStore ps;
    auto w1 = ps.add("w1", random_matrix(rng, 1, 16, -1.0, 1.0));
    auto b1 = ps.add("b1", random_matrix(rng, 1, 16, -0.5, 0.5));
    auto w2 = ps.add("w2", random_matrix(rng, 16, 16, -0.5, 0.5));
    auto b2 = ps.add("b2", random_matrix(rng, 1, 16, -0.5, 0.5));
    auto w3 = ps.add("w3", random_matrix(rng, 16, 6, -0.5, 0.5));
    auto b3 = ps.add("b3", random_matrix(rng, 1, 6, -0.5, 0.5));
    Graph g(&ps);
    auto b = g.input(Matrix::scalar(0.35));
    auto h1 = g.activation(g.add(g.matmul(b, g.parameter(w1)), g.parameter(b1)), Activation::relu);
    auto h2 = g.activation(g.add(g.matmul(h1, g.parameter(w2)), g.parameter(b2)), Activation::relu);
    auto out = g.activation(g.add(g.matmul(h2, g.parameter(w3)), g.parameter(b3)), Activation::sigmoid);
    auto loss = g.mse(out, g.input(random_matrix(rng, 1, 6, 0.1, 0.9)));
    auto ids = ps.ids();
    CHECK(grad_check(g, loss, ps, ids).max_relative_error() <= 1e-4);
}

TEST_CASE("grad_check: constant function has exactly zero gradient") {
    ParameterStore ps;
    auto w = ps.add("w", Matrix(3, 3, 0.7));
    Graph g(&ps);
    g.parameter(w);
    auto loss = g.mse(g.input(Matrix(1, 2, 1.0)), g.input(Matrix(1, 2, 0.0)));
    std::vector<ParamId> ids{w};
    auto report = grad_check(g, loss, ps, ids);
    CHECK(report.max_relative_error() == 0.0);
    g.forward(loss);
    g.backward(loss);
    for (double v : ps[w].grad.values()) CHECK(v == 0.0);
}

TEST_CASE("every op kind passes 100 seeded finite-difference trials") {
    for (const auto& [name, build] : op_builders()) {
        double worst = 0.0;
        for (std::uint64_t trial = 0; trial < 100; ++trial) {
            Rng rng(stream_seed(trial, name));
            ParameterStore ps;
            Graph g(&ps);
            NodeId loss = build(g, ps, rng);
            auto ids = ps.ids();
            worst = std::max(worst, grad_check(g, loss, ps, ids).max_relative_error());
        }
        INFO(name);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("masked softmax rows sum to one and masked entries are exactly zero") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix mask(5, 7);
        for (std::size_t r = 0; r < 5; ++r) {
            for (std::size_t c = 0; c < 7; ++c) mask(r, c) = rng.uniform() < 0.4 ? 1.0 : 0.0;
            mask(r, rng.index(7)) = 1.0;
        }
        Graph g;
        auto y = g.masked_softmax(g.input(random_matrix(rng, 5, 7, -30.0, 30.0)), mask);
        const Matrix& out = g.forward(y);
        for (std::size_t r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                if (mask(r, c) == 0.0) CHECK(out(r, c) == 0.0);
                sum += out(r, c);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("fully masked softmax row is rejected") {
    Graph g;
    Matrix mask(2, 2, 1.0);
    mask(1, 0) = mask(1, 1) = 0.0;
    auto y = g.masked_softmax(g.input(Matrix(2, 2, 0.0)), mask);
    CHECK_THROWS_AS(g.forward(y), GraphError);
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const double spread = std::pow(10.0, rng.uniform(-1.9, 2.0));
        Matrix x = random_matrix(rng, 3, 8, -spread, spread);
        Graph g;
        const Matrix& y = g.forward(g.layer_norm(g.input(x)));
        for (std::size_t r = 0; r < 3; ++r) {
            double mx = 0.0, vx = 0.0, my = 0.0, vy = 0.0;
            for (std::size_t c = 0; c < 8; ++c) {
                mx += x(r, c);
                my += y(r, c);
            }
            mx /= 8.0;
            my /= 8.0;
            for (std::size_t c = 0; c < 8; ++c) {
                vx += (x(r, c) - mx) * (x(r, c) - mx);
                vy += (y(r, c) - my) * (y(r, c) - my);
            }
            vx /= 8.0;
            vy /= 8.0;
            CHECK(std::abs(my) <= 1e-9);
            if (vx >= 1e-4) CHECK(std::abs(vy - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("sgd step") {
    ParameterStore ps;
    auto w = ps.add("w", Matrix::scalar(1.0));
    ps[w].grad(0, 0) = 1.0;
    auto state = make_sgd(0.1);
    optimizer_step(ps, state);
    CHECK(ps[w].value(0, 0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(ps[w].grad(0, 0) == 0.0);
    CHECK(state.step == 1);
}

TEST_CASE("adam first step moves by the learning rate") {
    ParameterStore ps;
    auto w = ps.add("w", Matrix::scalar(1.0));
    ps[w].grad(0, 0) = 1.0;
    auto state = make_adam(ps, 1e-3);
    optimizer_step(ps, state);
    // m = 0.1, v = 0.001; bias correction gives mhat = vhat = 1.
    const double expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
    CHECK(ps[w].value(0, 0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(std::abs(1.0 - ps[w].value(0, 0) - 1e-3) < 1e-10);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
        ParameterStore ps;
        auto w = ps.add("w", Matrix{{0.25, -1.5}});
        auto state = kind == OptimizerKind::sgd ? make_sgd(0.5) : make_adam(ps, 0.5);
        optimizer_step(ps, state);
        CHECK(ps[w].value == Matrix{{0.25, -1.5}});
    }
}

TEST_CASE("adam without a moment table entry errors") {
    ParameterStore ps;
    ps.add("w", Matrix::scalar(1.0));
    auto state = make_adam(ps, 1e-3);
    ps.add("late", Matrix::scalar(1.0));
    CHECK_THROWS_AS(optimizer_step(ps, state), std::logic_error);
}

TEST_CASE("tensor json round trip is lossless") {
    Rng rng(42);
    ParameterStore ps;
    ps.add("layer0.w", random_matrix(rng, 3, 5));
    ps.add("layer0.b", random_matrix(rng, 1, 5));
    ps.add("tiny", Matrix{{1e-300, -0.1, 0.30000000000000004}});
    const std::string text = ps.to_json().dump();
    ParameterStore back = ParameterStore::from_json(nlohmann::json::parse(text));
    CHECK(back == ps);
    CHECK(back.to_json().dump() == text);
}

TEST_CASE("duplicate parameter names are rejected") {
    ParameterStore ps;
    ps.add("w", Matrix::scalar(1.0));
    CHECK_THROWS_AS(ps.add("w", Matrix::scalar(2.0)), std::invalid_argument);
}
