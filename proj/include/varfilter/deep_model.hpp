#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "varfilter/model.hpp"

namespace varfilter {

struct DeepModelDims {
    std::size_t latent_dim = 8;
    std::size_t obs_dim = 8;
    std::size_t hidden_dim = 64;
    std::size_t mlp_width = 64;
};

// Log-variance heads are clamped to this range to keep exp() sane early in
// training; gradients vanish outside, which the small-weight init avoids.
constexpr double kLogVarClamp = 10.0;

/**
 * Compact deep recurrent latent variable model.
 *
 * A single gated recurrent cell consumes [x_{t-1}, z_{t-1}]; a two-layer
 * prior network maps the hidden state to the dynamics distribution; a
 * two-layer decoder maps [h_t, z_t] to the output distribution. The step-one
 * prior is a learned constant pair. Nonlinearities are clipped leaky ReLUs.
 */
class DeepSequenceModel : public DynamicalModel {
public:
    DeepSequenceModel(const DeepModelDims& dims, OutputFamily family, std::uint64_t seed,
                      double bin_width = 1.0 / 256.0)
        : dims_(dims), family_(family), seed_(seed), bin_width_(bin_width) {
        if (dims.latent_dim == 0 || dims.obs_dim == 0 || dims.hidden_dim == 0 ||
            dims.mlp_width == 0) {
            throw InvalidArgument("DeepSequenceModel: all dims must be positive");
        }
        if (family == OutputFamily::DiscretizedGaussian && !(bin_width > 0.0)) {
            throw InvalidArgument("DeepSequenceModel: bin_width must be positive");
        }
        Rng rng(Rng::sub_seed(seed, 0xdeefULL));
        const std::size_t in = dims.obs_dim + dims.latent_dim;
        const std::size_t h = dims.hidden_dim;
        const std::size_t w = dims.mlp_width;
        const std::size_t zl = dims.latent_dim;
        const std::size_t xo = dims.obs_dim;

        // Gated recurrent cell over [x_{t-1}, z_{t-1}].
        w_reset_ = add_weight(rng, "cell.w_reset", h, in);
        u_reset_ = add_weight(rng, "cell.u_reset", h, h);
        b_reset_ = add_bias("cell.b_reset", h);
        w_update_ = add_weight(rng, "cell.w_update", h, in);
        u_update_ = add_weight(rng, "cell.u_update", h, h);
        b_update_ = add_bias("cell.b_update", h);
        w_cand_ = add_weight(rng, "cell.w_cand", h, in);
        u_cand_ = add_weight(rng, "cell.u_cand", h, h);
        b_cand_ = add_bias("cell.b_cand", h);

        // Prior network h -> (mean, log var), plus the learned step-one prior.
        prior_w1_ = add_weight(rng, "prior.w1", w, h);
        prior_b1_ = add_bias("prior.b1", w);
        prior_mean_w_ = add_weight(rng, "prior.mean_w", zl, w);
        prior_mean_b_ = add_bias("prior.mean_b", zl);
        prior_lv_w_ = add_weight(rng, "prior.log_var_w", zl, w);
        prior_lv_b_ = add_bias("prior.log_var_b", zl);
        init_prior_mean_ = add_bias("prior.init_mean", zl);
        init_prior_lv_ = add_bias("prior.init_log_var", zl);

        // Decoder [h, z] -> output parameters.
        dec_w1_ = add_weight(rng, "decoder.w1", w, h + zl);
        dec_b1_ = add_bias("decoder.b1", w);
        dec_mean_w_ = add_weight(rng, "decoder.mean_w", xo, w);
        dec_mean_b_ = add_bias("decoder.mean_b", xo);
        if (family != OutputFamily::Bernoulli) {
            dec_lv_w_ = add_weight(rng, "decoder.log_var_w", xo, w);
            dec_lv_b_ = add_bias("decoder.log_var_b", xo);
        }
    }

    ModelState init_state() const override {
        ModelState s;
        s.hidden = Var::constant(Tensor({dims_.hidden_dim}), "h0");
        s.step_index = 0;
        return s;
    }

    DiagonalGaussian prior(const ModelState& state) const override {
        if (state.step_index == 0) {
            return DiagonalGaussian(init_prior_mean_,
                                    clamp(init_prior_lv_, -kLogVarClamp, kLogVarClamp));
        }
        Var a1 = clipped_leaky_relu(affine(prior_w1_, state.hidden, prior_b1_));
        Var mean = affine(prior_mean_w_, a1, prior_mean_b_);
        Var log_var = clamp(affine(prior_lv_w_, a1, prior_lv_b_), -kLogVarClamp, kLogVarClamp);
        return DiagonalGaussian(mean, log_var);
    }

    OutputDistribution decode(const ModelState& state, const Var& z) const override {
        if (z.size() != dims_.latent_dim) {
            throw ShapeError("DeepSequenceModel::decode: z " + z.value().shape_string() +
                             " vs latent dim " + std::to_string(dims_.latent_dim));
        }
        Var a1 = clipped_leaky_relu(affine(dec_w1_, concat({state.hidden, z}), dec_b1_));
        Var head = affine(dec_mean_w_, a1, dec_mean_b_);
        if (family_ == OutputFamily::Bernoulli) {
            return {Bernoulli(head)};
        }
        Var log_var = clamp(affine(dec_lv_w_, a1, dec_lv_b_), -kLogVarClamp, kLogVarClamp);
        if (family_ == OutputFamily::Gaussian) {
            return {DiagonalGaussian(head, log_var)};
        }
        return {DiscretizedGaussian(head, log_var, bin_width_)};
    }

    ModelState update_state(const ModelState& state, const Var& x, const Var& z) const override {
        if (x.size() != dims_.obs_dim || z.size() != dims_.latent_dim) {
            throw ShapeError("DeepSequenceModel::update_state: x " + x.value().shape_string() +
                             ", z " + z.value().shape_string());
        }
        Var u = concat({x, z});
        const Var& h = state.hidden;
        Var reset = sigmoid(add(affine(w_reset_, u, b_reset_), matmul(u_reset_, h)));
        Var keep = sigmoid(add(affine(w_update_, u, b_update_), matmul(u_update_, h)));
        Var cand = tanh(add(affine(w_cand_, u, b_cand_), matmul(u_cand_, mul(reset, h))));
        Var ones = Var::constant(Tensor::full({dims_.hidden_dim}, 1.0), "ones");
        ModelState next;
        next.hidden = add(mul(keep, h), mul(sub(ones, keep), cand));
        next.step_index = state.step_index + 1;
        return next;
    }

    std::size_t latent_dim() const override { return dims_.latent_dim; }
    std::size_t obs_dim() const override { return dims_.obs_dim; }
    std::size_t hidden_dim() const override { return dims_.hidden_dim; }
    OutputFamily output_family() const override { return family_; }
    std::string kind() const override { return "deep"; }

    const ParamSet& params() const override { return params_; }
    ParamSet& params() override { return params_; }

    const DeepModelDims& dims() const { return dims_; }
    std::uint64_t seed() const { return seed_; }
    double bin_width() const { return bin_width_; }

private:
    Var add_weight(Rng& rng, const std::string& name, std::size_t rows, std::size_t cols) {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        Tensor t({rows, cols});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
        return params_.add(name, std::move(t));
    }

    Var add_bias(const std::string& name, std::size_t n) {
        return params_.add(name, Tensor({n}));
    }

    DeepModelDims dims_;
    OutputFamily family_;
    std::uint64_t seed_;
    double bin_width_;
    ParamSet params_;

    Var w_reset_, u_reset_, b_reset_;
    Var w_update_, u_update_, b_update_;
    Var w_cand_, u_cand_, b_cand_;
    Var prior_w1_, prior_b1_, prior_mean_w_, prior_mean_b_, prior_lv_w_, prior_lv_b_;
    Var init_prior_mean_, init_prior_lv_;
    Var dec_w1_, dec_b1_, dec_mean_w_, dec_mean_b_, dec_lv_w_, dec_lv_b_;
};

inline std::unique_ptr<DeepSequenceModel> make_deep_model(const DeepModelDims& dims,
                                                          OutputFamily family,
                                                          std::uint64_t seed,
                                                          double bin_width = 1.0 / 256.0) {
    return std::make_unique<DeepSequenceModel>(dims, family, seed, bin_width);
}

}  // namespace varfilter
