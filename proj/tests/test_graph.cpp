#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "decomp/graph.hpp"
#include "doctest.h"

using namespace decomp;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = nd(rng);
    return t;
}

// Direct 3x3 same-padding convolution, written independently of the im2col path.
Tensor naive_conv(const Tensor& x, const Tensor& w) {
    const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
    Tensor out(Shape{co, h, wd});
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx) {
                double acc = 0.0;
                for (std::size_t i = 0; i < c; ++i)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sy = static_cast<int>(y) + dy;
                            const int sx = static_cast<int>(xx) + dx;
                            if (sy < 0 || sx < 0 || sy >= static_cast<int>(h) || sx >= static_cast<int>(wd)) continue;
                            acc += x[(i * h + sy) * wd + sx] * w[((o * c + i) * 3 + (dy + 1)) * 3 + (dx + 1)];
                        }
                out[(o * h + y) * wd + xx] = acc;
            }
    return out;
}

// Builds loss = sum(op(params) * r) for a fixed random projection r, then
// returns the worst fd_check over all parameters.
double op_fd_error(std::mt19937_64& rng, const std::vector<Tensor>& inputs,
                   const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& build) {
    Graph g;
    std::vector<NodeId> ids;
    for (const Tensor& t : inputs) ids.push_back(g.parameter(t));
    const NodeId out = build(g, ids);
    const NodeId r = g.input(random_tensor(rng, g.value(out).shape()));
    const NodeId loss = ops::sum(g, ops::mul(g, out, r));
    double worst = 0.0;
    for (NodeId p : ids) worst = std::max(worst, fd_check(g, loss, p, 1e-5));
    return worst;
}

}  // namespace

TEST_CASE("matmul with identity returns the input") {
    Graph g;
    const NodeId a = g.input(Tensor::from({2, 2}, {1, 2, 3, 4}));
    const NodeId i = g.input(Tensor::from({2, 2}, {1, 0, 0, 1}));
    CHECK(g.value(ops::matmul(g, a, i)) == Tensor::from({2, 2}, {1, 2, 3, 4}));
}

TEST_CASE("softmax of equal logits is uniform") {
    Graph g;
    const NodeId x = g.input(Tensor::from({1, 2}, {0, 0}));
    CHECK(g.value(ops::softmax(g, x, 1)) == Tensor::from({1, 2}, {0.5, 0.5}));
}

TEST_CASE("conv2d of all-ones input and kernel counts in-bounds taps") {
    Graph g;
    const NodeId x = g.input(Tensor(Shape{1, 1, 3, 3}, 1.0));
    const NodeId w = g.input(Tensor(Shape{1, 1, 3, 3}, 1.0));
    const Tensor& y = g.value(ops::conv2d(g, x, w));
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y[4] == 9.0);
    CHECK(y[0] == 4.0);
    CHECK(y[2] == 4.0);
    CHECK(y[6] == 4.0);
    CHECK(y[8] == 4.0);
    CHECK(y[1] == 6.0);
}

TEST_CASE("conv2d matches a direct convolution on random data") {
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor(rng, {3, 5, 7});
    const Tensor w = random_tensor(rng, {4, 3, 3, 3});
    Graph g;
    const Tensor& y = g.value(ops::conv2d(g, g.input(x), g.input(w)));
    const Tensor ref = naive_conv(x, w);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("shape errors name the op and both shapes") {
    Graph g;
    const NodeId a = g.input(Tensor(Shape{2, 3}));
    const NodeId b = g.input(Tensor(Shape{2, 3}));
    try {
        ops::matmul(g, a, b);
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::add(g, a, g.input(Tensor(Shape{3, 2}))), ShapeError);
    CHECK_THROWS_AS(op_from_name("maxpool"), UnknownOpError);
    CHECK(op_from_name("conv2d") == Op::conv2d);
    CHECK(op_from_name("group_norm") == Op::group_norm);
}

TEST_CASE("backward: analytic derivatives of simple forms") {
    SUBCASE("mean of square") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({1}, {2}));
        const NodeId loss = ops::mean(g, ops::square(g, x));
        CHECK(g.backward(loss).at(x)[0] == 4.0);
    }
    SUBCASE("bilinear sum") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({2}, {1, 2}));
        const NodeId y = g.parameter(Tensor::from({2}, {3, 4}));
        const auto grads = g.backward(ops::sum(g, ops::mul(g, x, y)));
        CHECK(grads.at(x) == Tensor::from({2}, {3, 4}));
        CHECK(grads.at(y) == Tensor::from({2}, {1, 2}));
    }
    SUBCASE("unreachable parameters get zeros") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({2}, {1, 2}));
        const NodeId unused = g.parameter(Tensor::from({3}, {5, 6, 7}));
        const auto grads = g.backward(ops::sum(g, x));
        CHECK(grads.at(unused) == Tensor(Shape{3}));
    }
    SUBCASE("non-scalar loss is rejected") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({2}, {1, 2}));
        CHECK_THROWS_AS(g.backward(x), ShapeError);
    }
}

TEST_CASE("fd_check oracles") {
    std::mt19937_64 rng(17);
    SUBCASE("quadratic") {
        Graph g;
        const NodeId x = g.parameter(random_tensor(rng, {6}));
        const NodeId loss = ops::sum(g, ops::square(g, x));
        CHECK(fd_check(g, loss, x, 1e-5) < 1e-6);
    }
    SUBCASE("softmax + mse composite") {
        Graph g;
        const NodeId x = g.parameter(random_tensor(rng, {3, 5}));
        const NodeId target = g.input(random_tensor(rng, {3, 5}, 0.2));
        const NodeId loss = ops::mean(g, ops::square(g, ops::sub(g, ops::softmax(g, x, 1), target)));
        CHECK(fd_check(g, loss, x, 1e-5) < 1e-4);
    }
    SUBCASE("zero-parameter graph") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({1}, {3}));
        const NodeId c = g.input(Tensor::from({1}, {2}));
        const NodeId loss = ops::sum(g, ops::square(g, c));
        CHECK(fd_check(g, loss, x, 1e-5) == 0.0);
    }
    SUBCASE("non-positive step") {
        Graph g;
        const NodeId x = g.parameter(Tensor::from({1}, {3}));
        CHECK_THROWS(fd_check(g, ops::sum(g, x), x, 0.0));
    }
}

TEST_CASE("every op passes randomized finite-difference checks") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> dim(1, 4);
    using Ids = std::vector<NodeId>;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t a = dim(rng), b = dim(rng), c = dim(rng);
        auto rt = [&](Shape s) { return random_tensor(rng, std::move(s)); };
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({a, b})}, [](Graph& g, const Ids& i) { return ops::add(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({a, b})}, [](Graph& g, const Ids& i) { return ops::sub(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({a, b})}, [](Graph& g, const Ids& i) { return ops::mul(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({b, c})}, [](Graph& g, const Ids& i) { return ops::matmul(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({b, a}), rt({c, b})}, [](Graph& g, const Ids& i) { return ops::matmul(g, i[0], i[1], true, true); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b + 1, c + 1}), rt({2, a, 3, 3})}, [](Graph& g, const Ids& i) { return ops::conv2d(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b + 1, c})}, [](Graph& g, const Ids& i) { return ops::softmax(g, i[0], 1); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [](Graph& g, const Ids& i) { return ops::silu(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({4 * a, b + 1, 2}), rt({4 * a}), rt({4 * a})},
                                             [](Graph& g, const Ids& i) { return ops::group_norm(g, i[0], i[1], i[2]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [=](Graph& g, const Ids& i) { return ops::reshape(g, i[0], {b * a}); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [](Graph& g, const Ids& i) { return ops::mean(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [](Graph& g, const Ids& i) { return ops::sum(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b, c}), rt({a, 1, 1})}, [](Graph& g, const Ids& i) { return ops::broadcast_add(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({b})}, [](Graph& g, const Ids& i) { return ops::broadcast_add(g, i[0], i[1]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [](Graph& g, const Ids& i) { return ops::square(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b})}, [](Graph& g, const Ids& i) { return ops::scale(g, i[0], -0.7); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, 2 * b, 2 * c})}, [](Graph& g, const Ids& i) { return ops::avg_pool2(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b, c})}, [](Graph& g, const Ids& i) { return ops::upsample2(g, i[0]); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b + 1})}, [](Graph& g, const Ids& i) { return ops::column(g, i[0], 1); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a + 1, b})}, [](Graph& g, const Ids& i) { return ops::gather_rows(g, i[0], {1, 0, 1}); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a, b}), rt({b}), rt({c, b})}, [](Graph& g, const Ids& i) { return ops::concat_rows(g, {i[0], i[1], i[2]}); }));
        worst = std::max(worst, op_fd_error(rng, {rt({a + 2, b + 1})}, [](Graph& g, const Ids& i) { return ops::minmax_normalize(g, i[0]); }));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        Graph g;
        const Tensor x = random_tensor(rng, {4, 6, 3}, 5.0);
        const Tensor& y = g.value(ops::softmax(g, g.input(x), 1));
        for (std::size_t o = 0; o < 4; ++o)
            for (std::size_t i = 0; i < 3; ++i) {
                double s = 0.0;
                for (std::size_t e = 0; e < 6; ++e) {
                    const double v = y[(o * 6 + e) * 3 + i];
                    CHECK(v >= 0.0);
                    s += v;
                }
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
    }
}

TEST_CASE("forward evaluation is bit-identical on repeat") {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor(rng, {4, 6, 6});
    const Tensor w = random_tensor(rng, {4, 4, 3, 3});
    auto run = [&] {
        Graph g;
        const NodeId h = ops::conv2d(g, g.input(x), g.input(w));
        const NodeId n = ops::group_norm(g, h, g.input(Tensor(Shape{4}, 1.0)), g.input(Tensor(Shape{4})));
        return g.value(ops::silu(g, n));
    };
    CHECK(run() == run());
}

TEST_CASE("minmax normalization of a constant map is all zeros") {
    Graph g;
    const NodeId x = g.parameter(Tensor(Shape{2, 2}, 0.3));
    const NodeId y = ops::minmax_normalize(g, x);
    CHECK(g.value(y) == Tensor(Shape{2, 2}));
    CHECK(g.backward(ops::sum(g, y)).at(x) == Tensor(Shape{2, 2}));
}
