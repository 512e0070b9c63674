#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "varfilter/gradcheck.hpp"
#include "varfilter/ops.hpp"
#include "varfilter/rng.hpp"

using namespace varfilter;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("tensor basics") {
    Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    REQUIRE(t.at(1, 2) == 6.0);
    REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
    REQUIRE(Tensor::scalar(3.0).scalar_value() == 3.0);
}

TEST_CASE("elementwise forward values") {
    // Positive branch is the identity; negative branch is exp(x) - 1.
    Var pos = elu(Var::constant_scalar(1.0));
    REQUIRE(pos.value().scalar_value() == 1.0);

    const double elu_neg_expected = std::expm1(-1.0);  // scalar closed form
    Var neg = elu(Var::constant_scalar(-1.0));
    REQUIRE_THAT(neg.value().scalar_value(),
                 Catch::Matchers::WithinAbs(elu_neg_expected, 1e-15));
    REQUIRE_THAT(neg.value().scalar_value(), Catch::Matchers::WithinAbs(-0.632121, 1e-6));

    Var a = Var::constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var eye = Var::constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Var prod = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(prod.value()[i] == a.value()[i]);
}

TEST_CASE("shape and domain errors are structured") {
    Var a = Var::constant(Tensor::vector({1, 2}));
    Var b = Var::constant(Tensor::vector({1, 2, 3}));
    REQUIRE_THROWS_AS(add(a, b), ShapeError);
    REQUIRE_THROWS_WITH(add(a, b), ContainsSubstring("add"));
    REQUIRE_THROWS_WITH(add(a, b), ContainsSubstring("[2]"));
    REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
    REQUIRE_THROWS_WITH(matmul(a, b), ContainsSubstring("matmul"));

    REQUIRE_THROWS_AS(log(Var::constant_scalar(-1.0)), DomainError);
    REQUIRE_THROWS_AS(log(Var::constant_scalar(0.0)), DomainError);
}

TEST_CASE("backward on simple graphs") {
    SECTION("d/dx sum(x^2) = 2x") {
        Var x = Var::parameter(Tensor::vector({1, 2, 3}));
        backward(sum(square(x)));
        REQUIRE(x.grad()[0] == 2.0);
        REQUIRE(x.grad()[1] == 4.0);
        REQUIRE(x.grad()[2] == 6.0);
    }
    SECTION("sigmoid'(0) = sigma(0)(1 - sigma(0))") {
        const double expected = 0.5 * (1.0 - 0.5);
        Var x = Var::parameter(Tensor::scalar(0.0));
        backward(sigmoid(x));
        REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(expected, 1e-15));
    }
    SECTION("disconnected parameter keeps zero gradient") {
        Var x = Var::parameter(Tensor::vector({1, 2}));
        Var unused = Var::parameter(Tensor::vector({5, 5}));
        backward(sum(x));
        REQUIRE(unused.grad()[0] == 0.0);
        REQUIRE(unused.grad()[1] == 0.0);
    }
    SECTION("non-scalar loss rejected") {
        Var x = Var::parameter(Tensor::vector({1, 2}));
        REQUIRE_THROWS_AS(backward(square(x)), InvalidArgument);
    }
}

TEST_CASE("gradient accumulation is additive") {
    Var x = Var::parameter(Tensor::vector({1.0, -2.0}));
    Var loss = sum(square(x));
    backward(loss);
    const Tensor once = x.grad();
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) {
        REQUIRE(x.grad()[i] == 2.0 * once[i]);
    }
}

TEST_CASE("backward of a sum of losses equals the sum of backwards") {
    Rng rng(41);
    const Tensor point = rng.normal_vector(5);

    Var x1 = Var::parameter(point);
    backward(add(sum(square(x1)), sum(mul(x1, x1 + 1.0))));
    Var x2 = Var::parameter(point);
    backward(sum(square(x2)));
    backward(sum(mul(x2, x2 + 1.0)));

    for (std::size_t i = 0; i < point.size(); ++i) {
        REQUIRE_THAT(x1.grad()[i], Catch::Matchers::WithinRel(x2.grad()[i], 1e-14));
    }
}

TEST_CASE("identical graphs reproduce values and gradients bit for bit") {
    auto run = [] {
        Rng rng(99);
        Var x = Var::parameter(rng.normal_vector(6));
        Var w = Var::parameter(rng.normal_vector(6));
        Var loss = sum(mul(tanh(x), sigmoid(w))) + mean(square(x));
        backward(loss);
        return std::tuple{loss.value().scalar_value(), x.grad(), w.grad()};
    };
    auto [l1, gx1, gw1] = run();
    auto [l2, gx2, gw2] = run();
    REQUIRE(l1 == l2);
    for (std::size_t i = 0; i < gx1.size(); ++i) {
        REQUIRE(gx1[i] == gx2[i]);
        REQUIRE(gw1[i] == gw2[i]);
    }
}

TEST_CASE("finite_difference_check") {
    SECTION("quadratic is exact to roundoff") {
        auto f = [](const Var& v) { return sum(square(v)); };
        const double err = finite_difference_check(f, Tensor::vector({3.0}), 1e-5);
        REQUIRE(err < 1e-8);
    }
    SECTION("zero-gradient coordinate uses the 1e-8 floor") {
        // f ignores its input entirely: analytic and numeric are both 0.
        auto f = [](const Var& v) { return sum(mul(v, Var::constant(Tensor::vector({0.0})))); };
        const double err = finite_difference_check(f, Tensor::vector({2.0}), 1e-5);
        REQUIRE(std::isfinite(err));
        REQUIRE(err == 0.0);
    }
    SECTION("eps must be positive") {
        auto f = [](const Var& v) { return sum(v); };
        REQUIRE_THROWS_AS(finite_difference_check(f, Tensor::vector({1.0}), 0.0), InvalidArgument);
        REQUIRE_THROWS_AS(finite_difference_check(f, Tensor::vector({1.0}), -1e-3),
                          InvalidArgument);
    }
}

TEST_CASE("layer_normalize") {
    SECTION("constant vectors map to zero") {
        Var v = Var::constant(Tensor::vector({4.2, 4.2, 4.2}));
        Var out = layer_normalize(v);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE_THAT(out.value()[i], Catch::Matchers::WithinAbs(0.0, 1e-9));
        }
    }
    SECTION("[1,2,3] with eps=0 standardizes by the population std") {
        // Oracle: mean 2, population variance 2/3.
        const double scale = 1.0 / std::sqrt(2.0 / 3.0);
        Var out = layer_normalize(Var::constant(Tensor::vector({1, 2, 3})), 0.0);
        REQUIRE_THAT(out.value()[0], Catch::Matchers::WithinAbs(-scale, 1e-12));
        REQUIRE_THAT(out.value()[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(out.value()[2], Catch::Matchers::WithinAbs(scale, 1e-12));
        REQUIRE_THAT(out.value()[0], Catch::Matchers::WithinAbs(-1.224745, 1e-6));
    }
    SECTION("output mean vanishes for random vectors") {
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            Var out = layer_normalize(Var::constant(rng.normal_vector(9)));
            double m = 0.0;
            for (std::size_t i = 0; i < 9; ++i) m += out.value()[i];
            REQUIRE_THAT(m / 9.0, Catch::Matchers::WithinAbs(0.0, 1e-12));
        }
    }
    SECTION("gradient matches finite differences") {
        Rng rng(13);
        auto f = [](const Var& v) { return sum(mul(layer_normalize(v), v)); };
        REQUIRE(finite_difference_check(f, rng.normal_vector(5), 1e-5) < 1e-6);
    }
}

namespace {

// Random input away from the kinks and clip points of the piecewise ops, so
// central differences stay on one branch.
Tensor smooth_random_input(Rng& rng, std::size_t n) {
    Tensor t({n});
    for (std::size_t i = 0; i < n; ++i) {
        double v = rng.uniform(0.15, 2.4);
        if (rng.bernoulli(0.5)) v = -v;
        t[i] = v;
    }
    return t;
}

}  // namespace

TEST_CASE("every registered op kind passes the gradient check") {
    Rng rng(2024);
    constexpr double kEps = 1e-5;
    constexpr double kTol = 1e-5;

    for (OpKind kind : all_op_kinds()) {
        DYNAMIC_SECTION("op " << op_kind_name(kind)) {
            switch (kind) {
                case OpKind::Matmul: {
                    const Tensor w = smooth_random_input(rng, 6);
                    const Tensor v = smooth_random_input(rng, 3);
                    auto wrt_matrix = [&](const Var& p) {
                        Var m = detail::make_node(
                            "reshape", {p}, Tensor::matrix(2, 3, p.value().data()),
                            [](const Node&, const Tensor& g, const auto& emit) {
                                emit(0, Tensor::vector(g.data()));
                            });
                        return sum(forward_op(OpKind::Matmul, {m, Var::constant(v)}));
                    };
                    REQUIRE(finite_difference_check(wrt_matrix, w, kEps) < kTol);
                    auto wrt_vector = [&](const Var& p) {
                        return sum(forward_op(
                            OpKind::Matmul,
                            {Var::constant(Tensor::matrix(2, 3, w.data())), p}));
                    };
                    REQUIRE(finite_difference_check(wrt_vector, v, kEps) < kTol);
                    break;
                }
                case OpKind::Add:
                case OpKind::Sub:
                case OpKind::Mul: {
                    const Tensor other = smooth_random_input(rng, 4);
                    auto f = [&](const Var& p) {
                        return sum(mul(forward_op(kind, {p, Var::constant(other)}), p));
                    };
                    REQUIRE(finite_difference_check(f, smooth_random_input(rng, 4), kEps) < kTol);
                    break;
                }
                case OpKind::Concat: {
                    auto f = [&](const Var& p) {
                        Var c = forward_op(OpKind::Concat, {p, p});
                        return sum(mul(c, c + 0.5));
                    };
                    REQUIRE(finite_difference_check(f, smooth_random_input(rng, 3), kEps) < kTol);
                    break;
                }
                case OpKind::Broadcast: {
                    const Tensor weights = smooth_random_input(rng, 5);
                    auto f = [&](const Var& p) {
                        return sum(
                            mul(forward_op(OpKind::Broadcast, {p, Var::constant(weights)}),
                                Var::constant(weights)));
                    };
                    REQUIRE(finite_difference_check(f, Tensor::scalar(0.7), kEps) < kTol);
                    break;
                }
                case OpKind::Log: {
                    auto f = [&](const Var& p) { return sum(forward_op(OpKind::Log, {p})); };
                    REQUIRE(finite_difference_check(f, rng.uniform_vector(4, 0.4, 2.5), kEps) <
                            kTol);
                    break;
                }
                default: {
                    auto f = [&](const Var& p) {
                        Var out = forward_op(kind, {p});
                        return out.value().size() == 1 ? out : sum(mul(out, out + 0.25));
                    };
                    REQUIRE(finite_difference_check(f, smooth_random_input(rng, 4), kEps) < kTol);
                    break;
                }
            }
        }
    }
}

TEST_CASE("clamp family gradients") {
    Rng rng(5);
    auto f_clamp = [](const Var& p) { return sum(square(clamp(p, -1.0, 1.0))); };
    // Values inside, outside and well clear of the bounds.
    REQUIRE(finite_difference_check(f_clamp, Tensor::vector({-2.0, -0.4, 0.3, 1.7}), 1e-5) < 1e-5);
    auto f_floor = [](const Var& p) { return sum(log(clamp_min(p, 1e-3))); };
    REQUIRE(finite_difference_check(f_floor, Tensor::vector({-0.5, 0.2, 1.4}), 1e-5) < 1e-5);

    Var x = Var::parameter(Tensor::vector({5.0}));
    backward(sum(clipped_leaky_relu(x)));
    REQUIRE(x.grad()[0] == 0.0);  // clipped region
}

TEST_CASE("forward_op validates arity") {
    REQUIRE_THROWS_AS(forward_op(OpKind::Exp, {}), InvalidArgument);
    REQUIRE_THROWS_AS(
        forward_op(OpKind::Add, {Var::constant_scalar(1.0)}), InvalidArgument);
}
