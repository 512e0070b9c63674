#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "varfilter/deep_model.hpp"
#include "varfilter/gradcheck.hpp"
#include "varfilter/lgssm.hpp"

using namespace varfilter;

namespace {

// Scalar reference fixture: A=0.9, Q=0.1, C=1, b=0, R=0.1, init N(0,1).
std::unique_ptr<LinearGaussianSSM> scalar_fixture() {
    return make_lgssm(Tensor::matrix(1, 1, {0.9}), Tensor::vector({0.1}),
                      Tensor::matrix(1, 1, {1.0}), Tensor::vector({0.0}),
                      Tensor::vector({0.1}), Tensor::vector({0.0}), Tensor::vector({1.0}));
}

DeepModelDims tiny_dims() {
    DeepModelDims d;
    d.latent_dim = 2;
    d.obs_dim = 3;
    d.hidden_dim = 4;
    d.mlp_width = 4;
    return d;
}

}  // namespace

TEST_CASE("lgssm construction enforces invariants") {
    REQUIRE_NOTHROW(scalar_fixture());
    // Zero transition noise variance is rejected, naming the field.
    REQUIRE_THROWS_WITH(
        make_lgssm(Tensor::matrix(1, 1, {0.9}), Tensor::vector({0.0}),
                   Tensor::matrix(1, 1, {1.0}), Tensor::vector({0.0}), Tensor::vector({0.1}),
                   Tensor::vector({0.0}), Tensor::vector({1.0})),
        Catch::Matchers::ContainsSubstring("Q_diag"));
    REQUIRE_THROWS_AS(
        make_lgssm(Tensor::matrix(2, 1, {0.9, 0.1}), Tensor::vector({0.1}),
                   Tensor::matrix(1, 1, {1.0}), Tensor::vector({0.0}), Tensor::vector({0.1}),
                   Tensor::vector({0.0}), Tensor::vector({1.0})),
        InvalidArgument);
}

TEST_CASE("lgssm prior") {
    auto model = scalar_fixture();
    SECTION("step one uses the initial prior") {
        const DiagonalGaussian p = model->prior(model->init_state());
        REQUIRE(p.mean.value()[0] == 0.0);
        REQUIRE(p.log_var.value()[0] == Catch::Approx(0.0).margin(1e-14));
    }
    SECTION("later steps are linear in the previous latent") {
        ModelState state = model->update_state(model->init_state(),
                                               Var::constant(Tensor::vector({0.0})),
                                               Var::constant(Tensor::vector({1.0})));
        const DiagonalGaussian p = model->prior(state);
        REQUIRE_THAT(p.mean.value()[0], Catch::Matchers::WithinAbs(0.9, 1e-15));
        REQUIRE_THAT(std::exp(p.log_var.value()[0]), Catch::Matchers::WithinAbs(0.1, 1e-15));
    }
}

TEST_CASE("lgssm decode") {
    SECTION("identity emission passes the latent through") {
        auto model = make_lgssm(Tensor::matrix(2, 2, {0.9, 0.0, 0.0, 0.9}),
                                Tensor::vector({0.1, 0.1}),
                                Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}),
                                Tensor::vector({0.0, 0.0}), Tensor::vector({0.1, 0.1}),
                                Tensor::vector({0.0, 0.0}), Tensor::vector({1.0, 1.0}));
        const OutputDistribution out =
            model->decode(model->init_state(), Var::constant(Tensor::vector({1.0, 2.0})));
        const auto& g = std::get<DiagonalGaussian>(out.dist);
        REQUIRE(g.mean.value()[0] == 1.0);
        REQUIRE(g.mean.value()[1] == 2.0);
    }
    SECTION("scalar affine emission") {
        auto model = make_lgssm(Tensor::matrix(1, 1, {0.9}), Tensor::vector({0.1}),
                                Tensor::matrix(1, 1, {2.0}), Tensor::vector({1.0}),
                                Tensor::vector({0.3}), Tensor::vector({0.0}),
                                Tensor::vector({1.0}));
        const OutputDistribution out =
            model->decode(model->init_state(), Var::constant(Tensor::vector({3.0})));
        const auto& g = std::get<DiagonalGaussian>(out.dist);
        REQUIRE_THAT(g.mean.value()[0], Catch::Matchers::WithinAbs(7.0, 1e-15));
        REQUIRE_THAT(std::exp(g.log_var.value()[0]), Catch::Matchers::WithinAbs(0.3, 1e-15));
    }
    SECTION("dimension mismatch is rejected") {
        auto model = scalar_fixture();
        REQUIRE_THROWS_AS(
            model->decode(model->init_state(), Var::constant(Tensor::vector({1.0, 2.0}))),
            ShapeError);
    }
}

TEST_CASE("lgssm update_state carries the latent sample verbatim") {
    auto model = scalar_fixture();
    Var z = Var::constant(Tensor::vector({0.42}));
    const ModelState s1 = model->update_state(model->init_state(),
                                              Var::constant(Tensor::vector({1.0})), z);
    REQUIRE(s1.hidden.value()[0] == 0.42);
    REQUIRE(s1.step_index == 1);
    const ModelState s1b = model->update_state(model->init_state(),
                                               Var::constant(Tensor::vector({1.0})), z);
    REQUIRE(s1b.hidden.value()[0] == s1.hidden.value()[0]);
    REQUIRE(s1b.step_index == s1.step_index);
}

TEST_CASE("deep model construction is seed-deterministic") {
    auto a = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 1234);
    auto b = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 1234);
    auto c = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 4321);
    REQUIRE(a->params().size() == b->params().size());
    bool any_difference_from_c = false;
    for (std::size_t p = 0; p < a->params().size(); ++p) {
        const auto& pa = a->params().entries()[p];
        const auto& pb = b->params().entries()[p];
        REQUIRE(pa.name == pb.name);
        for (std::size_t i = 0; i < pa.var.size(); ++i) {
            REQUIRE(pa.var.value()[i] == pb.var.value()[i]);
        }
        const auto& pc = c->params().entries()[p];
        for (std::size_t i = 0; i < pa.var.size(); ++i) {
            if (pa.var.value()[i] != pc.var.value()[i]) any_difference_from_c = true;
        }
    }
    REQUIRE(any_difference_from_c);
}

TEST_CASE("deep model forward pass") {
    auto model = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 7);
    Rng rng(2);

    SECTION("step-one prior is the learned constant pair") {
        const DiagonalGaussian p = model->prior(model->init_state());
        REQUIRE(p.dim() == 2);
        REQUIRE(p.mean.value().all_finite());
    }
    SECTION("prior log variance stays finite after a recurrent step") {
        ModelState state = model->init_state();
        for (int t = 0; t < 3; ++t) {
            state = model->update_state(state, Var::constant(rng.normal_vector(3)),
                                        Var::constant(rng.normal_vector(2)));
            const DiagonalGaussian p = model->prior(state);
            REQUIRE(p.mean.value().all_finite());
            REQUIRE(p.log_var.value().all_finite());
        }
    }
    SECTION("bernoulli head emits obs_dim logits") {
        auto bmodel = make_deep_model(tiny_dims(), OutputFamily::Bernoulli, 7);
        const OutputDistribution out =
            bmodel->decode(bmodel->init_state(), Var::constant(rng.normal_vector(2)));
        REQUIRE(std::get<Bernoulli>(out.dist).dim() == 3);
    }
    SECTION("hidden state is sensitive to the latent input") {
        ModelState state = model->init_state();
        const Tensor x = rng.normal_vector(3);
        Var z = Var::parameter(rng.normal_vector(2));
        ModelState next = model->update_state(state, Var::constant(x), z);
        backward(sum(square(next.hidden)));
        double norm = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) norm += z.grad()[i] * z.grad()[i];
        REQUIRE(norm > 0.0);

        // Finite-difference sensitivity agrees.
        auto f = [&](const Var& v) {
            return sum(square(model->update_state(state, Var::constant(x), v).hidden));
        };
        REQUIRE(finite_difference_check(f, z.value(), 1e-5) < 1e-5);
    }
}

TEST_CASE("ancestral samples have finite joint density under their own model") {
    Rng rng(11);
    auto lgssm = scalar_fixture();
    const SampledSequence seq = sample_sequence(*lgssm, 10, rng);
    REQUIRE(std::isfinite(joint_log_prob(*lgssm, seq.observations, seq.latents)));

    auto deep = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 99);
    const SampledSequence dseq = sample_sequence(*deep, 6, rng);
    REQUIRE(std::isfinite(joint_log_prob(*deep, dseq.observations, dseq.latents)));

    auto bdeep = make_deep_model(tiny_dims(), OutputFamily::Bernoulli, 99);
    const SampledSequence bseq = sample_sequence(*bdeep, 6, rng);
    for (const Tensor& x : bseq.observations) {
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE((x[i] == 0.0 || x[i] == 1.0));
    }
    REQUIRE(std::isfinite(joint_log_prob(*bdeep, bseq.observations, bseq.latents)));
}

TEST_CASE("lgssm joint density factorizes into per-step gaussian terms") {
    auto model = make_lgssm(Tensor::matrix(2, 2, {0.9, 0.1, -0.2, 0.7}),
                            Tensor::vector({0.1, 0.2}), Tensor::matrix(2, 2, {1.0, 0.3, 0.0, 0.8}),
                            Tensor::vector({0.5, -0.5}), Tensor::vector({0.2, 0.4}),
                            Tensor::vector({0.1, -0.1}), Tensor::vector({1.0, 0.5}));
    Rng rng(23);
    const SampledSequence seq = sample_sequence(*model, 8, rng);

    // Independent accumulation from the closed-form Markov factorization.
    const Tensor A = model->A_values(), C = model->C_values(), b = model->b_values();
    const Tensor Q = model->Q_diag_values(), R = model->R_diag_values();
    const Tensor m0 = model->init_mean_values(), v0 = model->init_var_values();
    double expected = 0.0;
    for (std::size_t t = 0; t < seq.latents.size(); ++t) {
        const Tensor& z = seq.latents[t];
        for (std::size_t i = 0; i < 2; ++i) {
            double prior_mean = m0[i], prior_var = v0[i];
            if (t > 0) {
                prior_mean = A.at(i, 0) * seq.latents[t - 1][0] +
                             A.at(i, 1) * seq.latents[t - 1][1];
                prior_var = Q[i];
            }
            expected += gaussian_logpdf(z[i], prior_mean, prior_var);
            const double obs_mean = C.at(i, 0) * z[0] + C.at(i, 1) * z[1] + b[i];
            expected += gaussian_logpdf(seq.observations[t][i], obs_mean, R[i]);
        }
    }
    REQUIRE_THAT(joint_log_prob(*model, seq.observations, seq.latents),
                 Catch::Matchers::WithinAbs(expected, 1e-12));
}

TEST_CASE("model parameter gradients pass the finite-difference check") {
    Rng rng(31);

    SECTION("lgssm") {
        auto model = scalar_fixture();
        const Tensor x = rng.normal_vector(1);
        const Tensor z = rng.normal_vector(1);
        auto build = [&] {
            ModelState state = model->init_state();
            Var zc = Var::constant(z);
            Var loss = negate(model->decode(state, zc).log_prob(x));
            loss = add(loss, negate(gaussian_log_prob(zc, model->prior(state))));
            ModelState next = model->update_state(state, Var::constant(x), zc);
            return add(loss, negate(gaussian_log_prob(zc, model->prior(next))));
        };
        REQUIRE(finite_difference_check_params(build, model->params(), 1e-5) < 1e-5);
    }
    SECTION("deep model with every sub-network on the path") {
        auto model = make_deep_model(tiny_dims(), OutputFamily::Gaussian, 3);
        std::vector<Tensor> xs, zs;
        for (int t = 0; t < 3; ++t) {
            xs.push_back(rng.normal_vector(3));
            zs.push_back(rng.normal_vector(2));
        }
        auto build = [&] {
            ModelState state = model->init_state();
            Var loss;
            for (int t = 0; t < 3; ++t) {
                Var zc = Var::constant(zs[t]);
                Var term = add(negate(model->decode(state, zc).log_prob(xs[t])),
                               negate(gaussian_log_prob(zc, model->prior(state))));
                loss = loss.defined() ? add(loss, term) : term;
                state = model->update_state(state, Var::constant(xs[t]), zc);
            }
            return loss;
        };
        REQUIRE(finite_difference_check_params(build, model->params(), 1e-5) < 1e-5);
    }
}
