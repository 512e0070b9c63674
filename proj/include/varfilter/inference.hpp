#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "varfilter/lgssm.hpp"
#include "varfilter/model.hpp"
#include "varfilter/optim.hpp"

namespace varfilter {

/// Per-step variational parameters being optimized, with a count of how many
/// inference updates produced them (0 = straight from the prior).
struct ApproxPosterior {
    DiagonalGaussian lambda;
    int updates = 0;

    ModelState::Belief belief_values() const {
        Tensor var = lambda.log_var.value();
        for (std::size_t i = 0; i < var.size(); ++i) var[i] = std::exp(var[i]);
        return {lambda.mean.value(), std::move(var)};
    }
};

/// Fresh optimization variables initialized at the prior's parameters; the
/// copy severs any gradient path back into the prior.
inline ApproxPosterior init_at_prior(const DiagonalGaussian& prior) {
    ApproxPosterior q;
    q.lambda = DiagonalGaussian(Var::parameter(prior.mean.value(), "lambda_mean"),
                                Var::parameter(prior.log_var.value(), "lambda_log_var"));
    q.updates = 0;
    return q;
}

enum class ExpectationMode { MonteCarlo, Analytic };

struct ExpectationConfig {
    ExpectationMode mode = ExpectationMode::MonteCarlo;
    int n_samples = 1;
};

/// Reconstruction / KL split of one step free energy. `total` is always the
/// unweighted sum; `kl_weight` records the annealing weight applied to the
/// optimized objective.
struct StepFreeEnergy {
    double reconstruction = 0.0;
    double kl = 0.0;
    double total = 0.0;
    double kl_weight = 1.0;
};

/// Step free energy with its graph handles; `objective` carries the KL-
/// weighted quantity actually differentiated during annealed training.
struct StepEnergy {
    StepFreeEnergy values;
    Var recon;
    Var kl;
    Var objective;
    std::vector<Var> samples;  // reparameterized latent draws (Monte Carlo mode)
};

/**
 * Evaluate the step free energy of `q` against the given step prior.
 *
 * Monte Carlo mode estimates the reconstruction term from reparameterized
 * samples driven by the supplied noise (common random numbers are the
 * caller's responsibility); analytic mode computes it exactly and is only
 * defined for linear Gaussian decoders. The KL term is closed-form in both.
 */
inline StepEnergy step_free_energy(const DynamicalModel& model, const ModelState& state,
                                   const DiagonalGaussian& prior, const Tensor& x,
                                   const ApproxPosterior& q, const ExpectationConfig& cfg,
                                   const std::vector<Tensor>& noise, double kl_weight = 1.0) {
    StepEnergy out;
    if (cfg.mode == ExpectationMode::Analytic) {
        const auto* lgssm = dynamic_cast<const LinearGaussianSSM*>(&model);
        if (lgssm == nullptr || model.output_family() != OutputFamily::Gaussian) {
            throw InvalidArgument(
                "step_free_energy: analytic expectations require a linear Gaussian decoder");
        }
        Var expected = expected_linear_gaussian_loglik(Var::constant(x, "obs"), lgssm->C_var(),
                                                       lgssm->b_var(), exp(lgssm->log_r_var()),
                                                       q.lambda);
        out.recon = negate(expected);
    } else {
        if (cfg.n_samples < 1) throw InvalidArgument("step_free_energy: n_samples must be >= 1");
        if (noise.size() < static_cast<std::size_t>(cfg.n_samples)) {
            throw InvalidArgument("step_free_energy: need one noise vector per sample");
        }
        Var acc;
        for (int i = 0; i < cfg.n_samples; ++i) {
            Var z = reparameterized_sample(q.lambda, noise[i]);
            out.samples.push_back(z);
            Var lp = model.decode(state, z).log_prob(x);
            acc = i == 0 ? lp : add(acc, lp);
        }
        out.recon = scale(acc, -1.0 / static_cast<double>(cfg.n_samples));
    }
    out.kl = gaussian_kl(q.lambda, prior);
    out.objective = kl_weight == 1.0 ? add(out.recon, out.kl)
                                     : add(out.recon, scale(out.kl, kl_weight));
    out.values.reconstruction = out.recon.value().scalar_value();
    out.values.kl = out.kl.value().scalar_value();
    out.values.total = out.values.reconstruction + out.values.kl;
    out.values.kl_weight = kl_weight;
    return out;
}

/// Noise bundle for common-random-number evaluations of one step.
inline std::vector<Tensor> draw_step_noise(Rng& rng, std::size_t latent_dim, int n_samples) {
    std::vector<Tensor> noise;
    noise.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) noise.push_back(rng.normal_vector(latent_dim));
    return noise;
}

struct GradientEStepConfig {
    int iterations = 100;
    double step_size = 0.05;
    OptimizerKind optimizer = OptimizerKind::AdaptiveMoments;
    ExpectationConfig expectation;
    bool line_search = false;  // backtracking on the objective; plain SGD only

    void validate() const {
        if (iterations < 0) throw InvalidArgument("gradient_estep: negative iteration count");
        if (!(step_size > 0.0)) throw InvalidArgument("gradient_estep: step_size must be positive");
        if (line_search && optimizer != OptimizerKind::PlainSgd) {
            throw InvalidArgument("gradient_estep: line search requires plain_sgd");
        }
    }
};

namespace detail {

inline Tensor grad_or_zero(const GradientMap& map, const Var& v) {
    auto it = map.find(v.id());
    if (it == map.end()) return Tensor::zeros_like(v.value());
    return it->second;
}

/// Copy of the filtering context with all graph history severed. Inference
/// iterations differentiate the step free energy with the past held fixed,
/// so their backward passes must not walk the retained sequence graph.
inline ModelState detached_state(const ModelState& state) {
    ModelState out = state;
    if (out.hidden.defined() && out.hidden.requires_grad()) out.hidden = out.hidden.detach();
    return out;
}

inline DiagonalGaussian detached_prior(const DiagonalGaussian& prior) {
    return DiagonalGaussian(prior.mean.detach(), prior.log_var.detach());
}

}  // namespace detail

/**
 * Direct optimization E-step: minimize the step free energy over lambda,
 * starting from the prior, with common random numbers across iterations.
 * Returns the best iterate visited (the initial point included), so the
 * realized objective never exceeds the prior-initialized value.
 */
inline ApproxPosterior gradient_estep(const DynamicalModel& model, const ModelState& state,
                                      const DiagonalGaussian& prior, const Tensor& x,
                                      const GradientEStepConfig& cfg, Rng& rng,
                                      double kl_weight = 1.0,
                                      const std::optional<ModelState::Belief>& start = {},
                                      const std::vector<Tensor>* shared_noise = nullptr,
                                      std::vector<double>* objective_trace = nullptr) {
    cfg.validate();
    ApproxPosterior q = init_at_prior(prior);
    if (start) {
        q.lambda.mean.mutable_value() = start->mean;
        Tensor lv = start->var;
        for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = std::log(lv[i]);
        q.lambda.log_var.mutable_value() = lv;
    }
    if (cfg.iterations == 0) return q;

    const std::vector<Tensor> noise =
        shared_noise != nullptr
            ? *shared_noise
            : draw_step_noise(rng, model.latent_dim(), cfg.expectation.n_samples);
    const std::vector<Var> lambda_vars{q.lambda.mean, q.lambda.log_var};
    Optimizer opt(cfg.optimizer);

    // Lambda optimization holds the context fixed; operate on a severed copy
    // so every inner backward pass stays local to this step.
    const ModelState state_d = detail::detached_state(state);
    const DiagonalGaussian prior_d = detail::detached_prior(prior);

    Tensor best_mean = q.lambda.mean.value();
    Tensor best_log_var = q.lambda.log_var.value();
    double best_value = 0.0;

    for (int it = 0; it <= cfg.iterations; ++it) {
        StepEnergy energy = step_free_energy(model, state_d, prior_d, x, q, cfg.expectation,
                                             noise, kl_weight);
        const double value = energy.objective.value().scalar_value();
        if (objective_trace != nullptr) objective_trace->push_back(value);
        if (!std::isfinite(value)) {
            throw NumericalError("gradient_estep: non-finite free energy at iteration " +
                                 std::to_string(it));
        }
        if (it == 0 || value < best_value) {
            best_value = value;
            best_mean = q.lambda.mean.value();
            best_log_var = q.lambda.log_var.value();
        }
        if (it == cfg.iterations) break;

        GradientMap grads = backward_detached(energy.objective);
        std::vector<Tensor> g{detail::grad_or_zero(grads, q.lambda.mean),
                              detail::grad_or_zero(grads, q.lambda.log_var)};

        if (cfg.line_search) {
            // Backtracking: accept the first step that does not increase the
            // objective; otherwise stay put.
            const Tensor saved_mean = q.lambda.mean.value();
            const Tensor saved_lv = q.lambda.log_var.value();
            double alpha = cfg.step_size;
            bool accepted = false;
            for (int trial = 0; trial < 30 && !accepted; ++trial, alpha *= 0.5) {
                Tensor& mv = q.lambda.mean.mutable_value();
                Tensor& lv = q.lambda.log_var.mutable_value();
                for (std::size_t i = 0; i < mv.size(); ++i) {
                    mv[i] = saved_mean[i] - alpha * g[0][i];
                    lv[i] = saved_lv[i] - alpha * g[1][i];
                }
                const double candidate =
                    step_free_energy(model, state_d, prior_d, x, q, cfg.expectation, noise,
                                     kl_weight)
                        .objective.value()
                        .scalar_value();
                accepted = std::isfinite(candidate) && candidate <= value;
            }
            if (!accepted) {
                q.lambda.mean.mutable_value() = saved_mean;
                q.lambda.log_var.mutable_value() = saved_lv;
            }
        } else {
            opt.step(cfg.step_size, lambda_vars, g);
        }

        if (!q.lambda.mean.value().all_finite() || !q.lambda.log_var.value().all_finite()) {
            throw NumericalError("gradient_estep: lambda diverged at iteration " +
                                 std::to_string(it + 1));
        }
        q.updates = it + 1;
    }

    q.lambda.mean.mutable_value() = best_mean;
    q.lambda.log_var.mutable_value() = best_log_var;
    return q;
}

// ---------------------------------------------------------------------------
// Iterative amortized inference
// ---------------------------------------------------------------------------

struct InferenceNetConfig {
    std::size_t latent_dim = 0;
    std::size_t obs_dim = 0;     // used only when encode_data is on
    std::size_t width = 128;     // units per fully-connected layer
    bool encode_data = false;

    std::size_t input_dim() const { return 4 * latent_dim + (encode_data ? obs_dim : 0); }
};

/**
 * The inference-update network: encodes layer-normalized posterior parameters
 * and their free-energy gradients (optionally the observation as well) through
 * two fully-connected layers with a highway connection, then emits a gated
 * proposal per parameter block:
 *
 *   lambda_new = g (.) lambda_old + (1 - g) (.) proposal.
 *
 * Mean proposals are layer-normalized for stability; log-variance proposals
 * are clamped to [-10, 10].
 */
class IterativeInferenceModel {
public:
    IterativeInferenceModel(const InferenceNetConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), seed_(seed) {
        if (cfg.latent_dim == 0) throw InvalidArgument("IterativeInferenceModel: latent_dim 0");
        if (cfg.encode_data && cfg.obs_dim == 0) {
            throw InvalidArgument("IterativeInferenceModel: encode_data needs obs_dim");
        }
        Rng rng(Rng::sub_seed(seed, 0xf1eaULL));
        const std::size_t in = cfg.input_dim();
        const std::size_t w = cfg.width;
        const std::size_t z = cfg.latent_dim;
        w1_ = add_weight(rng, "infnet.w1", w, in);
        b1_ = params_.add("infnet.b1", Tensor({w}));
        w2_ = add_weight(rng, "infnet.w2", w, w);
        b2_ = params_.add("infnet.b2", Tensor({w}));
        gate2_w_ = add_weight(rng, "infnet.gate2_w", w, w);
        gate2_b_ = params_.add("infnet.gate2_b", Tensor({w}));
        mean_prop_w_ = add_weight(rng, "infnet.mean_prop_w", z, w);
        mean_prop_b_ = params_.add("infnet.mean_prop_b", Tensor({z}));
        mean_ln_gain_ = params_.add("infnet.mean_ln_gain", Tensor::full({z}, 1.0));
        mean_ln_bias_ = params_.add("infnet.mean_ln_bias", Tensor({z}));
        mean_gate_w_ = add_weight(rng, "infnet.mean_gate_w", z, w);
        mean_gate_b_ = params_.add("infnet.mean_gate_b", Tensor::full({z}, 1.0));
        lv_prop_w_ = add_weight(rng, "infnet.log_var_prop_w", z, w);
        lv_prop_b_ = params_.add("infnet.log_var_prop_b", Tensor({z}));
        lv_gate_w_ = add_weight(rng, "infnet.log_var_gate_w", z, w);
        lv_gate_b_ = params_.add("infnet.log_var_gate_b", Tensor::full({z}, 1.0));
    }

    /// One inference update. The gradients enter as plain tensors: they are
    /// constants with respect to both phi and theta.
    ApproxPosterior update(const ApproxPosterior& q, const Tensor& grad_mean,
                           const Tensor& grad_log_var,
                           const std::optional<Tensor>& x = std::nullopt) const {
        if (grad_mean.size() != cfg_.latent_dim || grad_log_var.size() != cfg_.latent_dim) {
            throw ShapeError("IterativeInferenceModel::update: gradient dims " +
                             grad_mean.shape_string() + "/" + grad_log_var.shape_string() +
                             " vs latent dim " + std::to_string(cfg_.latent_dim));
        }
        std::vector<Var> inputs{layer_normalize(q.lambda.mean),
                                layer_normalize(q.lambda.log_var),
                                layer_normalize(Var::constant(grad_mean, "grad_mean")),
                                layer_normalize(Var::constant(grad_log_var, "grad_log_var"))};
        if (cfg_.encode_data) {
            if (!x) throw InvalidArgument("IterativeInferenceModel: encode_data needs x");
            if (x->size() != cfg_.obs_dim) {
                throw ShapeError("IterativeInferenceModel::update: x " + x->shape_string() +
                                 " vs obs dim " + std::to_string(cfg_.obs_dim));
            }
            inputs.push_back(layer_normalize(Var::constant(*x, "obs")));
        }
        Var h1 = elu(affine(w1_, concat(inputs), b1_));
        Var cand = elu(affine(w2_, h1, b2_));
        Var carry = sigmoid(affine(gate2_w_, h1, gate2_b_));
        Var ones_w = Var::constant(Tensor::full({cfg_.width}, 1.0), "ones");
        Var h2 = add(mul(carry, h1), mul(sub(ones_w, carry), cand));

        Var ones_z = Var::constant(Tensor::full({cfg_.latent_dim}, 1.0), "ones");
        // Normalized mean proposal with a learnable elementwise rescaling.
        Var mean_prop = add(mul(mean_ln_gain_, layer_normalize(affine(mean_prop_w_, h2,
                                                                      mean_prop_b_))),
                            mean_ln_bias_);
        Var mean_gate = sigmoid(affine(mean_gate_w_, h2, mean_gate_b_));
        Var new_mean = add(mul(mean_gate, q.lambda.mean), mul(sub(ones_z, mean_gate), mean_prop));
        Var lv_prop = clamp(affine(lv_prop_w_, h2, lv_prop_b_), -10.0, 10.0);
        Var lv_gate = sigmoid(affine(lv_gate_w_, h2, lv_gate_b_));
        Var new_lv = add(mul(lv_gate, q.lambda.log_var), mul(sub(ones_z, lv_gate), lv_prop));

        ApproxPosterior out;
        out.lambda = DiagonalGaussian(new_mean, new_lv);
        out.updates = q.updates + 1;
        return out;
    }

    const InferenceNetConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    const ParamSet& params() const { return params_; }
    ParamSet& params() { return params_; }

private:
    Var add_weight(Rng& rng, const std::string& name, std::size_t rows, std::size_t cols) {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        Tensor t({rows, cols});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
        return params_.add(name, std::move(t));
    }

    InferenceNetConfig cfg_;
    std::uint64_t seed_;
    ParamSet params_;
    Var w1_, b1_, w2_, b2_, gate2_w_, gate2_b_;
    Var mean_prop_w_, mean_prop_b_, mean_ln_gain_, mean_ln_bias_;
    Var mean_gate_w_, mean_gate_b_;
    Var lv_prop_w_, lv_prop_b_, lv_gate_w_, lv_gate_b_;
};

struct LambdaGradient {
    Tensor mean;
    Tensor log_var;
};

/// lambda <- f_phi(lambda, grad); thin wrapper matching the update equation.
inline ApproxPosterior avf_update(const IterativeInferenceModel& f, const ApproxPosterior& q,
                                  const LambdaGradient& grad,
                                  const std::optional<Tensor>& x = std::nullopt) {
    return f.update(q, grad.mean, grad.log_var, x);
}

struct AvfStepResult {
    ApproxPosterior q;                   // final posterior (graph-connected to phi)
    std::vector<StepFreeEnergy> trace;   // K+1 entries, prior-initialized value first
    std::vector<Var> objectives;         // K post-update objectives (phi's training signal)
    Var final_objective;
    std::vector<Var> final_samples;      // z draws at the final lambda
};

/**
 * K rounds of step-free-energy evaluation and amortized update, starting from
 * the prior. Noise is drawn once per step and shared across iterations, so
 * successive free energies are comparable.
 *
 * Gradient signals are computed against a detached copy of the context (the
 * past is fixed during inference), which keeps each inner backward pass local
 * to the current step. When the caller's state carries graph history, the
 * post-update free energies are re-evaluated on the attached context so the
 * returned objectives still differentiate into theta through the recurrence;
 * both evaluations see identical numbers.
 */
inline AvfStepResult avf_infer(const IterativeInferenceModel& f, const DynamicalModel& model,
                               const ModelState& state, const DiagonalGaussian& prior,
                               const Tensor& x, int K, const ExpectationConfig& cfg, Rng& rng,
                               double kl_weight = 1.0) {
    if (K < 1) throw InvalidArgument("avf_infer: K must be >= 1");
    const std::vector<Tensor> noise = draw_step_noise(rng, model.latent_dim(), cfg.n_samples);
    AvfStepResult out;

    const bool attached_context = state.hidden.defined() && state.hidden.requires_grad();
    const ModelState state_d = detail::detached_state(state);
    const DiagonalGaussian prior_d = detail::detached_prior(prior);

    ApproxPosterior q = init_at_prior(prior);
    StepEnergy signal = step_free_energy(model, state_d, prior_d, x, q, cfg, noise, kl_weight);
    out.trace.push_back(signal.values);

    const std::optional<Tensor> data_input =
        f.config().encode_data ? std::optional<Tensor>(x) : std::nullopt;
    StepEnergy attached;
    for (int i = 0; i < K; ++i) {
        GradientMap grads = backward_detached(signal.objective);
        LambdaGradient g{detail::grad_or_zero(grads, q.lambda.mean),
                         detail::grad_or_zero(grads, q.lambda.log_var)};
        q = avf_update(f, q, g, data_input);
        attached = attached_context
                       ? step_free_energy(model, state, prior, x, q, cfg, noise, kl_weight)
                       : step_free_energy(model, state_d, prior_d, x, q, cfg, noise, kl_weight);
        out.trace.push_back(attached.values);
        out.objectives.push_back(attached.objective);
        if (!std::isfinite(attached.values.total)) {
            throw NumericalError("avf_infer: non-finite free energy at iteration " +
                                 std::to_string(i + 1));
        }
        if (i + 1 < K) {
            signal = attached_context
                         ? step_free_energy(model, state_d, prior_d, x, q, cfg, noise, kl_weight)
                         : attached;
        }
    }

    out.final_objective = out.objectives.back();
    out.final_samples = attached.samples;
    if (out.final_samples.empty()) {
        out.final_samples.push_back(reparameterized_sample(q.lambda, noise[0]));
    }
    out.q = std::move(q);
    return out;
}

}  // namespace varfilter
