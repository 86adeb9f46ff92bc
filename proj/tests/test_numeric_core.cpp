#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "msmg/graph.hpp"
#include "msmg/ops.hpp"

#include "gradcheck_util.hpp"

using namespace msmg;
namespace op = msmg::ops;

TEST_CASE("conv2d identity kernel") {
    Graph<double> g;
    int x = g.leaf(Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    int w = g.leaf(Tensor<double>::from({1, 1, 1, 1}, {1}));
    int y = op::conv2d(g, x, w, -1, 1, 0);
    CHECK(g.value(y).shape == std::vector<std::size_t>{1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(g.value(y)[i] == doctest::Approx(i + 1.0));
}

TEST_CASE("conv2d 2x2 diagonal kernel") {
    Graph<double> g;
    int x = g.leaf(Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    int w = g.leaf(Tensor<double>::from({1, 1, 2, 2}, {1, 0, 0, 1}));
    int y = op::conv2d(g, x, w, -1, 1, 0);
    CHECK(g.value(y).size() == 1);
    CHECK(g.value(y)[0] == doctest::Approx(5.0));
}

TEST_CASE("conv2d output shape and gradients, strided padded") {
    std::mt19937_64 rng(7);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    {
        Graph<double> g;
        int y = op::conv2d(g, g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
        CHECK(g.value(y).shape == std::vector<std::size_t>{2, 4, 4, 4});
    }
    double err = graph_gradcheck(
        [](Graph<double>& g, const std::vector<int>& in) {
            return op::conv2d(g, in[0], in[1], in[2], 2, 1);
        },
        {x, w, b}, rng);
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d grouped per-channel identity is the identity map") {
    std::mt19937_64 rng(3);
    auto x = random_tensor({1, 4, 5, 5}, rng);
    Graph<double> g;
    Tensor<double> w = Tensor<double>::zeros({4, 1, 1, 1});
    w.fill(1.0);
    int y = op::conv2d(g, g.leaf(x), g.leaf(w), -1, 1, 0, 4);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(y)[i] == x[i]);
}

TEST_CASE("conv2d structured shape errors") {
    Graph<double> g;
    int x = g.leaf(Tensor<double>::zeros({1, 3, 4, 4}));
    int w = g.leaf(Tensor<double>::zeros({2, 2, 3, 3}));
    CHECK_THROWS_AS(op::conv2d(g, x, w, -1, 1, 1), ShapeError);
}

TEST_CASE("max_pool2d basics") {
    Graph<double> g;
    int x = g.leaf(Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    int y = op::max_pool2d(g, x, 2, 2);
    CHECK(g.value(y).size() == 1);
    CHECK(g.value(y)[0] == 4.0);

    int c = g.leaf(Tensor<double>::full({1, 1, 4, 4}, 2.5));
    int yc = op::max_pool2d(g, c, 2, 2);
    for (auto v : g.value(yc).data) CHECK(v == 2.5);

    CHECK_THROWS_AS(op::max_pool2d(g, x, 5, 1), ShapeError);
}

TEST_CASE("max_pool2d gradient is a 0/1 routing mask") {
    std::mt19937_64 rng(11);
    auto x = random_tensor({1, 1, 6, 6}, rng);
    Graph<double> g;
    int xi = g.leaf(x, true);
    int y = op::max_pool2d(g, xi, 2, 2);
    int loss = op::sum_all(g, y);
    g.backward(loss);
    double sum = 0.0;
    for (auto v : g.grad(xi).data) {
        CHECK((v == 0.0 || v == 1.0));
        sum += v;
    }
    CHECK(sum == doctest::Approx(9.0));
}

TEST_CASE("linear trivial cases") {
    Graph<double> g;
    int x = g.leaf(Tensor<double>::from({1, 2}, {1, 2}));
    int w = g.leaf(Tensor<double>::from({2, 2}, {1, 1, 1, -1}));
    int b = g.leaf(Tensor<double>::zeros({2}));
    int y = op::linear(g, x, w, b);
    CHECK(g.value(y)[0] == doctest::Approx(3.0));
    CHECK(g.value(y)[1] == doctest::Approx(-1.0));

    // identity weight, zero bias
    int id = g.leaf(Tensor<double>::from({2, 2}, {1, 0, 0, 1}));
    int y2 = op::linear(g, x, id, b);
    CHECK(g.value(y2)[0] == 1.0);
    CHECK(g.value(y2)[1] == 2.0);

    int bad = g.leaf(Tensor<double>::zeros({3, 2}));
    CHECK_THROWS_AS(op::linear(g, x, bad, -1), ShapeError);
}

TEST_CASE("layer_norm trivial cases") {
    Graph<double> g;
    // already zero-mean unit-variance
    int x = g.leaf(Tensor<double>::from({1, 2}, {-1, 1}));
    int gain = g.leaf(Tensor<double>::full({2}, 1.0));
    int shift = g.leaf(Tensor<double>::zeros({2}));
    int y = op::layer_norm(g, x, gain, shift);
    CHECK(g.value(y)[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(g.value(y)[1] == doctest::Approx(1.0).epsilon(1e-4));

    // constant vector -> zeros before affine
    int c = g.leaf(Tensor<double>::full({1, 4}, 3.0));
    int gain4 = g.leaf(Tensor<double>::full({4}, 1.0));
    int shift4 = g.leaf(Tensor<double>::zeros({4}));
    int yc = op::layer_norm(g, c, gain4, shift4);
    for (auto v : g.value(yc).data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("softmax values and invariants") {
    Graph<double> g;
    int u = g.leaf(Tensor<double>::zeros({1, 5}));
    int yu = op::softmax(g, u, 1);
    for (auto v : g.value(yu).data) CHECK(v == doctest::Approx(0.2));

    int x = g.leaf(Tensor<double>::from({1, 2}, {0.0, std::log(3.0)}));
    int y = op::softmax(g, x, 1);
    CHECK(g.value(y)[0] == doctest::Approx(0.25));
    CHECK(g.value(y)[1] == doctest::Approx(0.75));

    std::mt19937_64 rng(5);
    auto r = random_tensor({3, 7}, rng, -5, 5);
    Graph<double> g2;
    int yr = op::softmax(g2, g2.leaf(r), 1);
    for (std::size_t row = 0; row < 3; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) {
            double v = g2.value(yr)[row * 7 + j];
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("bilinear upsample") {
    Graph<double> g;
    int c = g.leaf(Tensor<double>::full({1, 1, 3, 3}, 4.2));
    int yc = op::bilinear_upsample(g, c, 2);
    CHECK(g.value(yc).shape == std::vector<std::size_t>{1, 1, 6, 6});
    for (auto v : g.value(yc).data) CHECK(v == doctest::Approx(4.2));

    // columns of [[0,1],[0,1]] interpolate linearly, all values within [0,1]
    int x = g.leaf(Tensor<double>::from({1, 1, 2, 2}, {0, 1, 0, 1}));
    int y = op::bilinear_upsample(g, x, 2);
    const auto& v = g.value(y);
    // half-pixel centers: columns map to 0, 0.25, 0.75, 1
    CHECK(v.at4(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(v.at4(0, 0, 0, 1) == doctest::Approx(0.25));
    CHECK(v.at4(0, 0, 0, 2) == doctest::Approx(0.75));
    CHECK(v.at4(0, 0, 0, 3) == doctest::Approx(1.0));
    for (auto val : v.data) {
        CHECK(val >= 0.0);
        CHECK(val <= 1.0);
    }
}

TEST_CASE("flatten/unflatten round trip is the identity (random shapes)") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<std::size_t> d(1, 6);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t n = d(rng), c = d(rng), h = d(rng), w = d(rng);
        auto x = random_tensor({n, c, h, w}, rng);
        Graph<double> g;
        int xi = g.leaf(x);
        int f = op::flatten_spatial(g, xi);
        CHECK(g.value(f).shape == std::vector<std::size_t>{n, h * w, c});
        int u = op::unflatten_spatial(g, f, h, w);
        CHECK(g.value(u).shape == x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(u)[i] == x[i]);
    }
}

TEST_CASE("backward basics") {
    std::mt19937_64 rng(23);
    auto p = random_tensor({3, 4}, rng);

    SUBCASE("loss = sum(p) -> all-ones gradient") {
        Graph<double> g;
        int pi = g.leaf(p, true);
        g.backward(op::sum_all(g, pi));
        for (auto v : g.grad(pi).data) CHECK(v == 1.0);
    }
    SUBCASE("loss = sum(p^2)/2 -> gradient equals p") {
        Graph<double> g;
        int pi = g.leaf(p, true);
        int loss = op::scale(g, op::sum_all(g, op::mul(g, pi, pi)), 0.5);
        g.backward(loss);
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(g.grad(pi)[i] == doctest::Approx(p[i]));
    }
    SUBCASE("non-scalar loss rejected") {
        Graph<double> g;
        int pi = g.leaf(p, true);
        CHECK_THROWS_AS(g.backward(pi), ShapeError);
    }
    SUBCASE("backward twice into a store doubles the gradient") {
        ParamStore<double> store;
        int idx = store.add("p", p);
        auto run = [&]() {
            Graph<double> g;
            int pi = g.param(store, idx);
            g.backward(op::scale(g, op::sum_all(g, op::mul(g, pi, pi)), 0.5));
        };
        run();
        Tensor<double> once = store.grad(idx);
        run();
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(store.grad(idx)[i] == doctest::Approx(2.0 * once[i]));
    }
}

TEST_CASE("per-op finite difference checks, 20 seeds each") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed);
        CAPTURE(seed);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::conv2d(g, in[0], in[1], in[2], 1, 1);
                  },
                  {random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
                   random_tensor({3}, rng)},
                  rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::linear(g, in[0], in[1], in[2]);
                  },
                  {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                   random_tensor({5}, rng)},
                  rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::layer_norm(g, in[0], in[1], in[2]);
                  },
                  {random_tensor({4, 6}, rng), random_tensor({6}, rng, 0.5, 1.5),
                   random_tensor({6}, rng)},
                  rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::softmax(g, in[0], 1);
                  },
                  {random_tensor({3, 6}, rng, -3, 3)}, rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::gelu(g, in[0]);
                  },
                  {random_tensor({4, 4}, rng, -2, 2)}, rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::sigmoid(g, in[0]);
                  },
                  {random_tensor({4, 4}, rng, -3, 3)}, rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::bilinear_upsample(g, in[0], 2);
                  },
                  {random_tensor({1, 2, 3, 3}, rng)}, rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::max_pool2d(g, in[0], 2, 2);
                  },
                  {random_tensor({1, 2, 6, 6}, rng)}, rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::matmul(g, in[0], in[1]);
                  },
                  {random_tensor({2, 3, 4, 5}, rng), random_tensor({2, 3, 5, 4}, rng)},
                  rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      int c = op::concat(g, 1, {in[0], in[1]});
                      return op::slice(g, c, 1, 1, 3);
                  },
                  {random_tensor({2, 2, 3}, rng), random_tensor({2, 3, 3}, rng)},
                  rng) < 1e-4);

        CHECK(graph_gradcheck(
                  [](Graph<double>& g, const std::vector<int>& in) {
                      return op::sqrt_eps(g, op::mul(g, in[0], in[0]), 1e-8);
                  },
                  {random_tensor({3, 3}, rng, 0.2, 2.0)}, rng) < 1e-4);
    }
}

TEST_CASE("batch_norm2d training-mode gradients and running stats") {
    std::mt19937_64 rng(41);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto gamma = random_tensor({3}, rng, 0.5, 1.5);
    auto beta = random_tensor({3}, rng);
    Tensor<double> rm = Tensor<double>::zeros({3});
    Tensor<double> rv = Tensor<double>::full({3}, 1.0);
    double err = graph_gradcheck(
        [&rm, &rv](Graph<double>& g, const std::vector<int>& in) {
            Tensor<double> m = rm, v = rv;  // keep the checked fn pure
            return op::batch_norm2d(g, in[0], in[1], in[2], m, v, true);
        },
        {x, gamma, beta}, rng);
    CHECK(err < 1e-4);

    Graph<double> g;
    op::batch_norm2d(g, g.leaf(x), g.leaf(gamma), g.leaf(beta), rm, rv, true);
    CHECK(rm[0] != 0.0);  // running stats updated
}
