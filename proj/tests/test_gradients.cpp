#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qunet/losses.hpp"
#include "qunet/ops.hpp"
#include "testutil.hpp"

using namespace qunet;
using namespace qunet::testutil;

namespace {

// Scalar objective sum(c * op(x...)) with a fixed random cotangent c.
Tensor<double> cotangent(Rng& rng, const std::vector<int64_t>& shape) {
    Tensor<double> c(shape);
    for (auto& v : c.data) v = rng.uniform(-1, 1);
    return c;
}

}  // namespace

TEST_CASE("relu closed-form gradient cases") {
    Tensor<double> x({2});
    x.data = {1.0, -1.0};
    auto xv = make_leaf(x, true);
    backward(sum(relu(xv)));
    CHECK(xv->grad.data[0] == 1.0);
    CHECK(xv->grad.data[1] == 0.0);

    auto zero = make_leaf(Tensor<double>({1}, {0.0}), true);
    backward(sum(relu(zero)));
    CHECK(zero->grad.data[0] == 0.0);
}

TEST_CASE("sigmoid derivative at zero is 0.25") {
    auto x = make_leaf(Tensor<double>({3}, {0.0, 0.0, 0.0}), true);
    backward(sum(sigmoid(x)));
    for (int i = 0; i < 3; ++i) CHECK(x->grad.data[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("conv2d kernel gradient matches finite differences on 1x2x5x5") {
    Rng rng(123);
    Tensor<double> x = random_tensor(rng, {1, 2, 5, 5});
    Tensor<double> w0 = random_tensor(rng, {3, 2, 3, 3});
    Tensor<double> b0 = random_tensor(rng, {3});
    Tensor<double> c = cotangent(rng, {1, 3, 5, 5});

    auto wv = make_leaf(w0, true);
    backward(dot_const(conv2d(make_const(x), wv, make_const(b0), 1), c));

    auto f = [&](const Tensor<double>& w) {
        NoGradGuard ng;
        auto y = conv2d(make_const(x), make_const(w), make_const(b0), 1);
        double acc = 0;
        for (int64_t i = 0; i < y->value.numel(); ++i) acc += y->value.data[i] * c.data[i];
        return acc;
    };
    auto rep = check_gradient(f, w0, wv->grad, 1e-5, 1e-6, 1e-10);
    CHECK_MESSAGE(rep.ok, rep.detail);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradient suite: all differentiable ops vs central differences, 25 seeds") {
    for (uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng(seed * 7919 + 13);

        // conv2d: input, kernel, bias
        {
            Tensor<double> x = random_tensor(rng, {2, 2, 6, 6});
            Tensor<double> w = random_tensor(rng, {3, 2, 3, 3});
            Tensor<double> b = random_tensor(rng, {3});
            Tensor<double> c = cotangent(rng, {2, 3, 6, 6});
            auto xv = make_leaf(x, true);
            auto wv = make_leaf(w, true);
            auto bv = make_leaf(b, true);
            backward(dot_const(conv2d(xv, wv, bv, 1), c));
            auto fx = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv2d(make_const(t), make_const(w), make_const(b), 1);
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            auto fw = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv2d(make_const(x), make_const(t), make_const(b), 1);
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            auto fb = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv2d(make_const(x), make_const(w), make_const(t), 1);
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            CHECK_MESSAGE(check_gradient(fx, x, xv->grad).ok, "conv2d input, seed ", seed);
            CHECK_MESSAGE(check_gradient(fw, w, wv->grad).ok, "conv2d kernel, seed ", seed);
            CHECK_MESSAGE(check_gradient(fb, b, bv->grad).ok, "conv2d bias, seed ", seed);
        }

        // conv_transpose2d: input, kernel, bias
        {
            Tensor<double> x = random_tensor(rng, {1, 3, 4, 4});
            Tensor<double> w = random_tensor(rng, {3, 2, 2, 2});
            Tensor<double> b = random_tensor(rng, {2});
            Tensor<double> c = cotangent(rng, {1, 2, 8, 8});
            auto xv = make_leaf(x, true);
            auto wv = make_leaf(w, true);
            auto bv = make_leaf(b, true);
            backward(dot_const(conv_transpose2d(xv, wv, bv), c));
            auto fx = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv_transpose2d(make_const(t), make_const(w), make_const(b));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            auto fw = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv_transpose2d(make_const(x), make_const(t), make_const(b));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            auto fb = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = conv_transpose2d(make_const(x), make_const(w), make_const(t));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            CHECK_MESSAGE(check_gradient(fx, x, xv->grad).ok, "convT input, seed ", seed);
            CHECK_MESSAGE(check_gradient(fw, w, wv->grad).ok, "convT kernel, seed ", seed);
            CHECK_MESSAGE(check_gradient(fb, b, bv->grad).ok, "convT bias, seed ", seed);
        }

        // maxpool2d (inputs jittered away from ties)
        {
            Tensor<double> x = random_tensor(rng, {1, 2, 6, 6});
            for (int64_t i = 0; i < x.numel(); ++i) x.data[i] += 1e-3 * double(i % 97);
            Tensor<double> c = cotangent(rng, {1, 2, 3, 3});
            auto xv = make_leaf(x, true);
            backward(dot_const(maxpool2d(xv), c));
            auto f = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = maxpool2d(make_const(t));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            CHECK_MESSAGE(check_gradient(f, x, xv->grad).ok, "maxpool, seed ", seed);
        }

        // relu (inputs off the kink)
        {
            Tensor<double> x = random_tensor_off_kink(rng, {2, 3, 4, 4});
            Tensor<double> c = cotangent(rng, {2, 3, 4, 4});
            auto xv = make_leaf(x, true);
            backward(dot_const(relu(xv), c));
            auto f = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = relu(make_const(t));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            CHECK_MESSAGE(check_gradient(f, x, xv->grad).ok, "relu, seed ", seed);
        }

        // sigmoid
        {
            Tensor<double> x = random_tensor(rng, {3, 5}, -4.0, 4.0);
            Tensor<double> c = cotangent(rng, {3, 5});
            auto xv = make_leaf(x, true);
            backward(dot_const(sigmoid(xv), c));
            auto f = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = sigmoid(make_const(t));
                double a = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) a += y->value.data[i] * c.data[i];
                return a;
            };
            CHECK_MESSAGE(check_gradient(f, x, xv->grad).ok, "sigmoid, seed ", seed);
        }

        // concat_channels, both branches
        {
            Tensor<double> a = random_tensor(rng, {1, 2, 4, 4});
            Tensor<double> b = random_tensor(rng, {1, 3, 4, 4});
            Tensor<double> c = cotangent(rng, {1, 5, 4, 4});
            auto av = make_leaf(a, true);
            auto bv = make_leaf(b, true);
            backward(dot_const(concat_channels(av, bv), c));
            auto fa = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = concat_channels(make_const(t), make_const(b));
                double acc = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) acc += y->value.data[i] * c.data[i];
                return acc;
            };
            auto fb = [&](const Tensor<double>& t) {
                NoGradGuard ng;
                auto y = concat_channels(make_const(a), make_const(t));
                double acc = 0;
                for (int64_t i = 0; i < y->value.numel(); ++i) acc += y->value.data[i] * c.data[i];
                return acc;
            };
            CHECK_MESSAGE(check_gradient(fa, a, av->grad).ok, "concat a, seed ", seed);
            CHECK_MESSAGE(check_gradient(fb, b, bv->grad).ok, "concat b, seed ", seed);
        }

        // bce and dice losses w.r.t. pred
        {
            Tensor<double> p({2, 1, 4, 4});
            Tensor<double> t({2, 1, 4, 4});
            for (auto& v : p.data) v = rng.uniform(0.05, 0.95);
            for (auto& v : t.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
            auto pv = make_leaf(p, true);
            backward(bce_loss(pv, t));
            auto fb = [&](const Tensor<double>& q) {
                NoGradGuard ng;
                return bce_loss(make_const(q), t)->value.data[0];
            };
            auto rep = check_gradient(fb, p, pv->grad, 1e-6, 1e-5, 1e-10);
            CHECK_MESSAGE(rep.ok, "bce, seed ", seed, " ", rep.detail);

            auto pv2 = make_leaf(p, true);
            backward(dice_loss(pv2, t));
            auto fd = [&](const Tensor<double>& q) {
                NoGradGuard ng;
                return dice_loss(make_const(q), t)->value.data[0];
            };
            auto rep2 = check_gradient(fd, p, pv2->grad, 1e-6, 1e-5, 1e-10);
            CHECK_MESSAGE(rep2.ok, "dice, seed ", seed, " ", rep2.detail);
        }
    }
}

TEST_CASE("gradient of sum over concat routes ones to both inputs") {
    Tensor<double> a = Tensor<double>::full({1, 2, 2, 2}, 0.3);
    Tensor<double> b = Tensor<double>::full({1, 1, 2, 2}, -0.7);
    auto av = make_leaf(a, true);
    auto bv = make_leaf(b, true);
    backward(sum(concat_channels(av, bv)));
    for (auto g : av->grad.data) CHECK(g == 1.0);
    for (auto g : bv->grad.data) CHECK(g == 1.0);
}

TEST_CASE("d/dx sum(sigmoid(x)) at 0 is 0.25 per element") {
    auto x = make_leaf(Tensor<double>::zeros({4}), true);
    backward(sum(sigmoid(x)));
    for (auto g : x->grad.data) CHECK(g == doctest::Approx(0.25).epsilon(1e-12));
}
