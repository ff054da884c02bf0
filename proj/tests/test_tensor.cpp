#include "doctest.h"
#include "metamorph/optim.hpp"
#include "metamorph/tensor.hpp"

#include "gradcheck.hpp"

#include <cmath>

using namespace metamorph;

TEST_CASE("tensor: shape bookkeeping and invariants") {
    Tensor t = Tensor::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.ndim() == 3);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
}

TEST_CASE("conv2d: 3x3 ones kernel on 3x3 ones input, padding 1") {
    Tensor x = Tensor::ones({1, 1, 3, 3});
    Tensor k = Tensor::ones({1, 1, 3, 3});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, k, b, 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at({0, 0, 1, 1}) == doctest::Approx(9.0));
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4.0));
    CHECK(y.at({0, 0, 0, 2}) == doctest::Approx(4.0));
    CHECK(y.at({0, 0, 2, 0}) == doctest::Approx(4.0));
    CHECK(y.at({0, 0, 2, 2}) == doctest::Approx(4.0));
    CHECK(y.at({0, 0, 0, 1}) == doctest::Approx(6.0));
    CHECK(y.at({0, 0, 1, 0}) == doctest::Approx(6.0));
    CHECK(y.at({0, 0, 1, 2}) == doctest::Approx(6.0));
    CHECK(y.at({0, 0, 2, 1}) == doctest::Approx(6.0));
}

TEST_CASE("conv2d: Dirac kernel is identity; zero kernel passes bias through") {
    RngStream rng(5);
    Tensor x = Tensor::uniform({2, 1, 4, 4}, rng, -1.f, 1.f);
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    k.set({0, 0, 1, 1}, 1.f);
    Tensor y = conv2d(x, k, Tensor::zeros({1}), 1, 1);
    for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);

    Tensor zerok = Tensor::zeros({3, 1, 3, 3});
    Tensor bias = Tensor::from_data({3}, {0.5f, -1.f, 2.f});
    Tensor yb = conv2d(x, zerok, bias, 1, 1);
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 16; ++p)
            CHECK(yb.data()[size_t(c * 16 + p)] == bias.data()[size_t(c)]);
}

TEST_CASE("conv2d: output geometry and contract errors") {
    Tensor x = Tensor::ones({1, 2, 7, 7});
    Tensor k = Tensor::ones({4, 2, 3, 3});
    Tensor b = Tensor::zeros({4});
    CHECK(conv2d(x, k, b, 2, 1).shape() == Shape{1, 4, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor::ones({4, 3, 3, 3}), b, 1, 1), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor::ones({4, 2, 2, 2}), b, 1, 1), ContractError);
    CHECK_THROWS_AS(conv2d(x, k, Tensor::zeros({3}), 1, 1), ShapeError);
}

TEST_CASE("conv2d: non-finite input is rejected loudly") {
    Tensor x = Tensor::ones({1, 1, 3, 3});
    x.set({0, 0, 0, 0}, std::numeric_limits<float>::infinity());
    Tensor k = Tensor::ones({1, 1, 3, 3});
    CHECK_THROWS_AS(conv2d(x, k, Tensor::zeros({1}), 1, 1), NumericError);
    set_numeric_checks(false);
    CHECK_NOTHROW(conv2d(x, k, Tensor::zeros({1}), 1, 1));
    set_numeric_checks(true);
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
    Tensor p = Tensor::from_data({2}, {1.f, -2.f}, true);
    backward(sum(p));
    CHECK(p.grad()[0] == 1.f);
    CHECK(p.grad()[1] == 1.f);

    p.zero_grad();
    backward(sum_of_squares(p));
    CHECK(p.grad()[0] == doctest::Approx(2.f));
    CHECK(p.grad()[1] == doctest::Approx(-4.f));
}

TEST_CASE("backward: rejects non-scalar loss") {
    Tensor p = Tensor::ones({3}, true);
    Tensor y = relu(p);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("backward: repeated calls accumulate until grads are cleared") {
    Tensor p = Tensor::from_data({2}, {1.f, 2.f}, true);
    Tensor loss = sum_of_squares(p);
    backward(loss);
    backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(4.f));
    p.zero_grad();
    backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(2.f));
}

TEST_CASE("backward: linearity of accumulation") {
    RngStream rng(21);
    Tensor p = Tensor::uniform({4, 3}, rng, -1.f, 1.f, true);
    Tensor w = Tensor::uniform({4, 3}, rng, -1.f, 1.f);

    Tensor l1 = sum(mul(p, w));
    Tensor l2 = sum_of_squares(p);
    backward(l1);
    backward(l2);
    std::vector<float> separate = p.grad();

    p.zero_grad();
    backward(add(l1, l2));
    for (size_t i = 0; i < separate.size(); ++i)
        CHECK(p.grad()[i] == doctest::Approx(separate[i]).epsilon(1e-6));
}

TEST_CASE("backward: diamond-shaped graph reuses a node without double counting") {
    Tensor p = Tensor::from_data({1}, {3.f}, true);
    Tensor sq = mul(p, p);
    Tensor loss = add(sq, sq);  // d/dp 2p^2 = 4p = 12
    backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(12.f));
    p.zero_grad();
    backward(loss);
    CHECK(p.grad()[0] == doctest::Approx(12.f));
}

TEST_CASE("no-grad mode builds no graph") {
    Tensor p = Tensor::ones({2}, true);
    NoGradGuard ng;
    Tensor y = sum(p);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape ops: reshape, permute_axes, slice values") {
    Tensor t = Tensor::from_data({2, 3}, {0, 1, 2, 3, 4, 5});
    Tensor r = reshape(t, {3, 2});
    CHECK(r.at({2, 1}) == 5.f);
    CHECK_THROWS_AS(reshape(t, {4, 2}), ShapeError);

    Tensor p = permute_axes(t, {1, 0});
    CHECK(p.shape() == Shape{3, 2});
    CHECK(p.at({0, 1}) == 3.f);
    CHECK(p.at({2, 0}) == 2.f);

    Tensor s = slice(t, 1, 1, 2);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s.at({0, 0}) == 1.f);
    CHECK(s.at({1, 1}) == 5.f);
}

TEST_CASE("determinism: identical seeds give bitwise-identical training step") {
    auto run = [](uint64_t seed) {
        RngStream rng(seed);
        Tensor x = Tensor::uniform({4, 1, 5, 5}, rng, -1.f, 1.f);
        Tensor k = Tensor::uniform({2, 1, 3, 3}, rng, -0.5f, 0.5f, true);
        Tensor b = Tensor::zeros({2}, true);
        std::vector<int> labels = {0, 1, 0, 1};
        AdamW opt({.learning_rate = 1e-2f});
        opt.add_params({k, b});
        for (int it = 0; it < 3; ++it) {
            Tensor y = global_avg_pool(conv2d(x, k, b, 1, 1));
            Tensor loss = softmax_cross_entropy(y, labels);
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        return k.data();
    };
    auto a = run(123), b = run(123), c = run(124);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("adamw: first-step value matches hand computation") {
    // theta=1, g=0.5, lr=1e-3, beta defaults, wd=0.01 -> ~0.99899
    TensorT<double> p = TensorT<double>::from_data({1}, {1.0}, true);
    p.grad()[0] = 0.5;
    AdamWT<double> opt({.learning_rate = 1e-3, .weight_decay = 0.01});
    opt.add_param(p);
    opt.step();

    double m = 0.1 * 0.5, v = 0.001 * 0.25;
    double mhat = m / 0.1, vhat = v / 0.001;
    double expected = 1.0 - 1e-3 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * 1.0);
    CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(p.data()[0] == doctest::Approx(0.99899).epsilon(1e-5));
    CHECK(opt.step_count(p) == 1);
}

TEST_CASE("adamw: zero lr and zero grad leave parameters unchanged") {
    Tensor p = Tensor::from_data({2}, {1.f, -2.f}, true);
    p.grad() = {0.3f, -0.7f};
    AdamW opt({.learning_rate = 0.f, .weight_decay = 0.5f});
    opt.add_param(p);
    opt.step();
    CHECK(p.data()[0] == 1.f);
    CHECK(p.data()[1] == -2.f);

    Tensor q = Tensor::from_data({2}, {1.f, -2.f}, true);
    q.zero_grad();
    AdamW opt2({.learning_rate = 1e-2f, .weight_decay = 0.f});
    opt2.add_param(q);
    opt2.step();
    CHECK(q.data()[0] == 1.f);
    CHECK(q.data()[1] == -2.f);
}

TEST_CASE("adamw: decay is decoupled from the moment path") {
    // with g=0 and wd>0 the update is exactly -lr*wd*theta
    Tensor p = Tensor::from_data({1}, {2.f}, true);
    p.zero_grad();
    AdamW opt({.learning_rate = 0.1f, .weight_decay = 0.5f});
    opt.add_param(p);
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(2.f - 0.1f * 0.5f * 2.f));
}

TEST_CASE("adamw: non-finite parameter after step fails loudly") {
    Tensor p = Tensor::from_data({1}, {1.f}, true);
    p.grad() = {std::numeric_limits<float>::quiet_NaN()};
    AdamW opt({.learning_rate = 1e-3f});
    opt.add_param(p);
    CHECK_THROWS_AS(opt.step(), NumericError);
}

TEST_CASE("gradcheck: every differentiable op matches finite differences") {
    for (auto& [name, maker] : gradcheck::op_suite()) {
        CAPTURE(name);
        double worst = gradcheck::run_op_suite(maker, 5, 1234);
        CHECK_MESSAGE(worst < 1e-4, name, " worst rel err ", worst);
    }
}

TEST_CASE("gradcheck: random 5-parameter MLP matches finite differences") {
    gradcheck::Instance inst;
    metamorph::RngStream rng(77);
    auto x = gradcheck::rand_t({4, 3}, rng);
    auto w1 = gradcheck::rand_t({6, 3}, rng);
    auto b1 = gradcheck::rand_t({6}, rng);
    auto w2 = gradcheck::rand_t({2, 6}, rng);
    auto b2 = gradcheck::rand_t({2}, rng);
    std::vector<int> labels = {0, 1, 1, 0};
    inst.params = {w1, b1, w2, b2, x};
    inst.loss = [=]() {
        auto h = metamorph::elu(metamorph::linear(x, w1, b1));
        return metamorph::softmax_cross_entropy(metamorph::linear(h, w2, b2), labels);
    };
    CHECK(gradcheck::max_rel_error(inst) < 1e-4);
}
