#include "steerreg/autodiff.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace steerreg;
using namespace steerreg::ad;

TEST_CASE("every differentiable op passes a central-difference check") {
    for (std::uint64_t seed : {11u, 12u}) {
        for (const auto& check : testing::gradient_suite(seed)) {
            INFO(check.op);
            CHECK(check.rel_error <= 1e-4);
        }
    }
}

TEST_CASE("small worked examples") {
    Tape tape;
    const Var zero = tape.leaf(Tensor::scalar(0.0));
    CHECK(sigmoid(zero).value()[0] == 0.5);

    tape.backward(sigmoid(zero));
    CHECK(tape.grad(zero)[0] == 0.25);

    const Var v = tape.leaf(Tensor(Shape{4}, std::vector<double>{1, 2, 3, 4}));
    CHECK(mean(v).value()[0] == 2.5);

    // d/dx of sum(x) is 1; d/dx of sum(x^2)/2 is x.
    {
        Tape t;
        const Var x = t.leaf(Tensor(Shape{3}, std::vector<double>{-1, 0.5, 2}));
        t.backward(sum(x));
        const Tensor g = t.grad(x);
        for (double v : g.data()) CHECK(v == 1.0);
    }
    {
        Tape t;
        const Var x = t.leaf(Tensor(Shape{3}, std::vector<double>{-1, 0.5, 2}));
        t.backward(scalar_mul(sum(square(x)), 0.5));
        const Tensor g = t.grad(x);
        CHECK(g[0] == -1.0);
        CHECK(g[1] == 0.5);
        CHECK(g[2] == 2.0);
    }
}

TEST_CASE("gradients accumulate over shared subexpressions") {
    Tape t;
    const Var x = t.leaf(Tensor::scalar(3.0));
    const Var y = mul(x, x);  // x used twice
    t.backward(add(y, x));
    CHECK(t.grad(x)[0] == doctest::Approx(7.0));
}

TEST_CASE("constants receive no gradient and unreachable nodes read as zero") {
    Tape t;
    const Var c = t.constant(Tensor::scalar(2.0));
    const Var x = t.leaf(Tensor::scalar(5.0));
    const Var unused = t.leaf(Tensor::scalar(1.0));
    CHECK_FALSE(t.requires_grad(mul(c, c)));
    t.backward(mul(c, x));
    CHECK(t.grad(x)[0] == 2.0);
    CHECK(t.grad(unused)[0] == 0.0);
}

TEST_CASE("backward requires a scalar") {
    Tape t;
    const Var x = t.leaf(Tensor(Shape{2}, 1.0));
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("shape errors") {
    Tape t;
    const Var a = t.leaf(Tensor(Shape{2, 3}));
    const Var b = t.leaf(Tensor(Shape{3, 2}));
    CHECK_THROWS(add(a, b));
    const Var vol = t.leaf(Tensor(Shape{1, 2, 3, 3, 3}));
    CHECK_THROWS(slice_channels(vol, 1, 2));
    CHECK_THROWS(forward_diff(vol, 3));
    CHECK_THROWS(crop_spatial(vol, 4, 3, 3));
}

TEST_CASE("property: the gradient of a linear map is independent of the input") {
    Rng rng(21);
    const Tensor w = testing::random_tensor({2, 1, 3, 3, 3}, rng);
    Tensor first;
    for (int trial = 0; trial < 3; ++trial) {
        Tape t;
        const Var x = t.leaf(testing::random_tensor({1, 1, 5, 5, 5}, rng));
        const Var k = t.constant(w);
        t.backward(sum(conv3d(x, k, 1, 1)));
        const Tensor g = t.grad(x);
        if (trial == 0) {
            first = g;
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(first[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("tensor copies do not alias") {
    Tensor a(Shape{3}, 1.0);
    Tensor b = a;
    b[0] = 5.0;
    CHECK(a[0] == 1.0);
    CHECK_THROWS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}));
}
