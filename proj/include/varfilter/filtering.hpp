#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "varfilter/inference.hpp"

namespace varfilter {

/// Which E-step runs at each filtering step.
struct InferenceSpec {
    enum class Kind { GradientEStep, Avf };

    Kind kind = Kind::GradientEStep;
    GradientEStepConfig gradient;            // Kind::GradientEStep settings
    int avf_iterations = 1;                  // K for Kind::Avf
    ExpectationConfig avf_expectation;       // expectation estimator for Kind::Avf

    const ExpectationConfig& expectation() const {
        return kind == Kind::GradientEStep ? gradient.expectation : avf_expectation;
    }
};

/// Everything produced by filtering one sequence. Objective handles are only
/// populated in training mode and feed the M-step backward passes.
struct FilterTrace {
    std::vector<StepFreeEnergy> per_step;
    double total = 0.0;  // sum of unweighted per-step totals
    std::vector<Tensor> latent_samples;
    std::vector<std::pair<Tensor, Tensor>> posterior_params;  // (mean, log_var) per step
    std::vector<std::vector<StepFreeEnergy>> avf_traces;      // per step, K+1 entries
    Var theta_objective;  // sum over steps of the final (KL-weighted) objectives
    Var phi_objective;    // sum over steps and inference iterations (AVF only)
    std::vector<Var> step_objectives;  // the same objectives, one per step (training only)
};

/**
 * Algorithm core: sequential per-step inference over one sequence.
 *
 * Each step builds the prior from the current state, runs the configured
 * E-step on the step free energy, draws z_t from the final posterior and
 * advances the recurrent state. Past samples are never revisited. In exact-
 * expectation (analytic) mode the prior after step one is the dynamics prior
 * marginalized over the previous filtered belief, which is what makes
 * converged inference agree with the exact filter on diagonal fixtures.
 *
 * Reported per-step totals are always unweighted; `kl_weight` only scales the
 * KL term inside the optimized objective during annealed training.
 */
inline FilterTrace filter_sequence(const DynamicalModel& model, const InferenceSpec& spec,
                                   const IterativeInferenceModel* infnet,
                                   const std::vector<Tensor>& xs, Rng& rng,
                                   double kl_weight = 1.0, bool training = false) {
    if (xs.empty()) throw InvalidArgument("filter_sequence: empty sequence");
    for (const Tensor& x : xs) {
        if (x.size() != model.obs_dim()) {
            throw ShapeError("filter_sequence: observation " + x.shape_string() +
                             " vs obs dim " + std::to_string(model.obs_dim()));
        }
    }
    const bool analytic = spec.expectation().mode == ExpectationMode::Analytic;
    const auto* lgssm = dynamic_cast<const LinearGaussianSSM*>(&model);
    if (analytic && lgssm == nullptr) {
        throw InvalidArgument("filter_sequence: analytic expectations require an LGSSM");
    }
    if (spec.kind == InferenceSpec::Kind::Avf && infnet == nullptr) {
        throw InvalidArgument("filter_sequence: AVF strategy needs an inference model");
    }

    FilterTrace trace;
    trace.per_step.reserve(xs.size());
    ModelState state = model.init_state();

    for (std::size_t t = 0; t < xs.size(); ++t) {
        const DiagonalGaussian prior = (analytic && state.belief)
                                           ? lgssm->predictive_prior(*state.belief)
                                           : model.prior(state);

        ApproxPosterior q;
        StepFreeEnergy values;
        Var objective;
        Var z;
        try {
        if (spec.kind == InferenceSpec::Kind::GradientEStep) {
            const std::vector<Tensor> noise =
                draw_step_noise(rng, model.latent_dim(), spec.gradient.expectation.n_samples);
            q = gradient_estep(model, state, prior, xs[t], spec.gradient, rng, kl_weight,
                               std::nullopt, &noise);
            StepEnergy energy = step_free_energy(model, state, prior, xs[t], q,
                                                 spec.gradient.expectation, noise, kl_weight);
            values = energy.values;
            objective = energy.objective;
            z = energy.samples.empty() ? reparameterized_sample(q.lambda, noise[0])
                                       : energy.samples[0];
        } else {
            AvfStepResult result = avf_infer(*infnet, model, state, prior, xs[t],
                                             spec.avf_iterations, spec.avf_expectation, rng,
                                             kl_weight);
            values = result.trace.back();
            objective = result.final_objective;
            z = result.final_samples[0];
            trace.avf_traces.push_back(std::move(result.trace));
            if (training) {
                for (const Var& obj : result.objectives) {
                    trace.phi_objective =
                        trace.phi_objective.defined() ? add(trace.phi_objective, obj) : obj;
                }
            }
            q = std::move(result.q);
        }
        } catch (const NumericalError& e) {
            throw NumericalError("filter_sequence: step " + std::to_string(t + 1) + ": " +
                                 e.what());
        }

        if (!std::isfinite(values.total)) {
            throw NumericalError("filter_sequence: non-finite free energy at step " +
                                 std::to_string(t + 1));
        }
        trace.per_step.push_back(values);
        trace.total += values.total;
        trace.latent_samples.push_back(z.value());
        trace.posterior_params.emplace_back(q.lambda.mean.value(), q.lambda.log_var.value());
        if (training) {
            trace.theta_objective =
                trace.theta_objective.defined() ? add(trace.theta_objective, objective) : objective;
            trace.step_objectives.push_back(objective);
        }

        ModelState next = model.update_state(state, Var::constant(xs[t], "x_t"),
                                             training ? z : z.detach());
        if (!training) next.hidden = next.hidden.detach();  // keep eval memory flat
        next.belief = q.belief_values();
        state = std::move(next);
    }
    return trace;
}

/**
 * Evaluate the filtering free energy of an externally supplied posterior
 * sequence (one (mean, log_var) pair per step) without any inference
 * optimization. Latents are drawn from the given posteriors to advance the
 * state; in analytic mode the chained predictive priors come from the same
 * posteriors. Useful for diagnostics and bound checks.
 */
inline FilterTrace filter_with_posteriors(
    const DynamicalModel& model, const std::vector<Tensor>& xs,
    const std::vector<std::pair<Tensor, Tensor>>& lambdas, const ExpectationConfig& expectation,
    Rng& rng, bool training = false) {
    if (xs.empty() || lambdas.size() != xs.size()) {
        throw InvalidArgument("filter_with_posteriors: need one posterior per step");
    }
    const bool analytic = expectation.mode == ExpectationMode::Analytic;
    const auto* lgssm = dynamic_cast<const LinearGaussianSSM*>(&model);
    if (analytic && lgssm == nullptr) {
        throw InvalidArgument("filter_with_posteriors: analytic expectations require an LGSSM");
    }
    FilterTrace trace;
    ModelState state = model.init_state();
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const DiagonalGaussian prior = (analytic && state.belief)
                                           ? lgssm->predictive_prior(*state.belief)
                                           : model.prior(state);
        ApproxPosterior q;
        q.lambda = DiagonalGaussian::constants(lambdas[t].first, lambdas[t].second);
        const std::vector<Tensor> noise =
            draw_step_noise(rng, model.latent_dim(), expectation.n_samples);
        const StepEnergy energy =
            step_free_energy(model, state, prior, xs[t], q, expectation, noise);
        trace.per_step.push_back(energy.values);
        trace.total += energy.values.total;
        Var z = energy.samples.empty() ? reparameterized_sample(q.lambda, noise[0])
                                       : energy.samples[0];
        trace.latent_samples.push_back(z.value());
        trace.posterior_params.emplace_back(lambdas[t].first, lambdas[t].second);
        if (training) {
            trace.theta_objective = trace.theta_objective.defined()
                                        ? add(trace.theta_objective, energy.objective)
                                        : energy.objective;
            trace.step_objectives.push_back(energy.objective);
        }
        ModelState next = model.update_state(state, Var::constant(xs[t], "x_t"),
                                             training ? z : z.detach());
        if (!training) next.hidden = next.hidden.detach();
        next.belief = q.belief_values();
        state = std::move(next);
    }
    return trace;
}

/// Linear KL warm-up: min(1, (epoch+1)/n); disabled (weight 1) when n = 0.
inline double kl_anneal_weight(int epoch_index, int kl_anneal_epochs) {
    if (epoch_index < 0 || kl_anneal_epochs < 0) {
        throw InvalidArgument("kl_anneal_weight: negative input");
    }
    if (kl_anneal_epochs == 0) return 1.0;
    return std::min(1.0, static_cast<double>(epoch_index + 1) /
                             static_cast<double>(kl_anneal_epochs));
}

/**
 * Per-sample identity between the monolithic free-energy estimator
 * -log [p(x, z) / q(z)] and the per-step accumulation of
 * -log p(x_t, z_t | .) + log q(z_t | .) on one shared latent trajectory.
 * Returns the relative discrepancy; posteriors are randomly offset from the
 * priors so the q terms do not trivially cancel.
 */
inline double verify_decomposition(const DynamicalModel& model, const std::vector<Tensor>& xs,
                                   Rng& rng) {
    if (xs.empty()) throw InvalidArgument("verify_decomposition: empty sequence");
    ModelState state = model.init_state();
    std::vector<Tensor> zs;
    zs.reserve(xs.size());
    double per_step_sum = 0.0;
    double sum_log_q = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const DiagonalGaussian prior = model.prior(state);
        Tensor mean = prior.mean.value();
        Tensor log_var = prior.log_var.value();
        for (std::size_t i = 0; i < mean.size(); ++i) {
            mean[i] += 0.3 * rng.normal();
            log_var[i] += 0.3 * rng.normal();
        }
        const DiagonalGaussian q = DiagonalGaussian::constants(mean, log_var);
        Tensor z({model.latent_dim()});
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = mean[i] + std::exp(0.5 * log_var[i]) * rng.normal();
        }
        Var zc = Var::constant(z, "z");
        const double log_q = gaussian_log_prob(zc, q).value().scalar_value();
        const double log_prior = gaussian_log_prob(zc, prior).value().scalar_value();
        const double log_lik = model.decode(state, zc).log_prob(xs[t]).value().scalar_value();
        per_step_sum += -(log_lik + log_prior) + log_q;
        sum_log_q += log_q;
        state = model.update_state(state, Var::constant(xs[t], "x"), zc);
        zs.push_back(std::move(z));
    }
    const double monolithic = -joint_log_prob(model, xs, zs) + sum_log_q;
    const double denom = std::max({std::fabs(monolithic), std::fabs(per_step_sum), 1e-300});
    return std::fabs(monolithic - per_step_sum) / denom;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 100;
    double learning_rate = 1e-3;
    double lr_decay_per_epoch = 0.999;
    int kl_anneal_epochs = 0;
    int batch_size = 32;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::AdaptiveMoments;
    bool train_model = true;  // freeze the generative model to train phi alone
    int threads = 1;
    int eval_every = 1;  // validation cadence in epochs; 0 = final epoch only

    void validate() const {
        if (epochs < 0) throw InvalidArgument("TrainConfig: negative epochs");
        if (!(learning_rate > 0.0)) throw InvalidArgument("TrainConfig: learning_rate must be > 0");
        if (!(lr_decay_per_epoch > 0.0) || lr_decay_per_epoch > 1.0) {
            throw InvalidArgument("TrainConfig: lr_decay_per_epoch must be in (0, 1]");
        }
        if (kl_anneal_epochs < 0) throw InvalidArgument("TrainConfig: negative kl_anneal_epochs");
        if (batch_size < 1) throw InvalidArgument("TrainConfig: batch_size must be >= 1");
        if (threads < 1) throw InvalidArgument("TrainConfig: threads must be >= 1");
    }
};

struct EpochMetrics {
    double mean_free_energy_per_step = 0.0;
    double mean_recon = 0.0;
    double mean_kl = 0.0;
};

namespace detail {

/// Index-parallel map with deterministic result placement.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (std::thread& th : pool) th.join();
}

struct SequenceOutcome {
    double fe_per_step = 0.0;
    double recon_per_step = 0.0;
    double kl_per_step = 0.0;
    GradientMap theta_grads;
    GradientMap phi_grads;
    std::size_t length = 1;
};

inline void merge_scaled(const GradientMap& source, const ParamSet& params, double factor) {
    for (const auto& entry : params.entries()) {
        auto it = source.find(entry.var.id());
        if (it == source.end()) continue;
        Tensor scaled = it->second;
        scaled.scale_(factor);
        Node* node = entry.var.raw();
        if (node->grad.empty()) node->grad = Tensor::zeros_like(node->value);
        node->grad.add_(scaled);
    }
}

}  // namespace detail

/// Seed for the RNG that drives one sequence's filtering pass; depends only
/// on (seed, epoch, sequence index) so thread count never changes results.
inline std::uint64_t sequence_stream_seed(std::uint64_t seed, int epoch_index,
                                          std::size_t sequence_index) {
    return Rng::sub_seed(seed, 0xf117e5ULL, static_cast<std::uint64_t>(epoch_index + 1),
                         static_cast<std::uint64_t>(sequence_index));
}

/**
 * One pass over the dataset: accumulate parameter gradients over all steps of
 * each mini-batch (per-sequence totals divided by their own lengths), apply
 * one optimizer update per batch. Gradient reduction follows dataset order
 * regardless of the thread count.
 */
inline EpochMetrics train_epoch(DynamicalModel& model, const InferenceSpec& spec,
                                IterativeInferenceModel* infnet,
                                const std::vector<std::vector<Tensor>>& sequences,
                                const TrainConfig& cfg, int epoch_index, Optimizer& optimizer,
                                const std::vector<Var>& trainable) {
    cfg.validate();
    if (sequences.empty()) throw InvalidArgument("train_epoch: empty dataset");
    const double kl_w = kl_anneal_weight(epoch_index, cfg.kl_anneal_epochs);
    const double lr = cfg.learning_rate * std::pow(cfg.lr_decay_per_epoch, epoch_index);
    const bool avf = spec.kind == InferenceSpec::Kind::Avf;

    EpochMetrics metrics;
    const std::size_t n = sequences.size();
    for (std::size_t batch_start = 0; batch_start < n; batch_start += cfg.batch_size) {
        const std::size_t batch_end = std::min(n, batch_start + cfg.batch_size);
        const std::size_t batch = batch_end - batch_start;
        std::vector<detail::SequenceOutcome> outcomes(batch);

        detail::parallel_for(batch, cfg.threads, [&](std::size_t k) {
            const std::size_t idx = batch_start + k;
            Rng rng(sequence_stream_seed(cfg.seed, epoch_index, idx));
            FilterTrace trace =
                filter_sequence(model, spec, infnet, sequences[idx], rng, kl_w, true);
            detail::SequenceOutcome& out = outcomes[k];
            out.length = sequences[idx].size();
            const double T = static_cast<double>(out.length);
            out.fe_per_step = trace.total / T;
            double recon = 0.0, kl = 0.0;
            for (const StepFreeEnergy& s : trace.per_step) {
                recon += s.reconstruction;
                kl += s.kl;
            }
            out.recon_per_step = recon / T;
            out.kl_per_step = kl / T;
            if (cfg.train_model) out.theta_grads = backward_detached(trace.theta_objective);
            if (avf && trace.phi_objective.defined()) {
                out.phi_grads = backward_detached(trace.phi_objective);
            }
        });

        for (std::size_t k = 0; k < batch; ++k) {
            const double factor =
                1.0 / (static_cast<double>(batch) * static_cast<double>(outcomes[k].length));
            if (cfg.train_model) {
                detail::merge_scaled(outcomes[k].theta_grads, model.params(), factor);
            }
            if (avf && infnet != nullptr) {
                detail::merge_scaled(outcomes[k].phi_grads, infnet->params(), factor);
            }
            metrics.mean_free_energy_per_step += outcomes[k].fe_per_step;
            metrics.mean_recon += outcomes[k].recon_per_step;
            metrics.mean_kl += outcomes[k].kl_per_step;
        }
        optimizer.step_from_grads(lr, trainable);
        for (const Var& p : trainable) const_cast<Var&>(p).zero_grad();
    }

    const double scale = 1.0 / static_cast<double>(n);
    metrics.mean_free_energy_per_step *= scale;
    metrics.mean_recon *= scale;
    metrics.mean_kl *= scale;
    return metrics;
}

/// Filtering pass over a dataset without parameter updates (kl weight 1).
inline EpochMetrics evaluate(const DynamicalModel& model, const InferenceSpec& spec,
                             const IterativeInferenceModel* infnet,
                             const std::vector<std::vector<Tensor>>& sequences,
                             std::uint64_t seed, int threads = 1) {
    if (sequences.empty()) throw InvalidArgument("evaluate: empty dataset");
    const std::size_t n = sequences.size();
    std::vector<EpochMetrics> partial(n);
    detail::parallel_for(n, threads, [&](std::size_t i) {
        Rng rng(sequence_stream_seed(seed, -1, i));  // eval stream, outside epoch numbering
        FilterTrace trace = filter_sequence(model, spec, infnet, sequences[i], rng, 1.0, false);
        const double T = static_cast<double>(sequences[i].size());
        double recon = 0.0, kl = 0.0;
        for (const StepFreeEnergy& s : trace.per_step) {
            recon += s.reconstruction;
            kl += s.kl;
        }
        partial[i] = {trace.total / T, recon / T, kl / T};
    });
    EpochMetrics metrics;
    for (const EpochMetrics& p : partial) {
        metrics.mean_free_energy_per_step += p.mean_free_energy_per_step;
        metrics.mean_recon += p.mean_recon;
        metrics.mean_kl += p.mean_kl;
    }
    const double scale = 1.0 / static_cast<double>(n);
    metrics.mean_free_energy_per_step *= scale;
    metrics.mean_recon *= scale;
    metrics.mean_kl *= scale;
    return metrics;
}

/// Mean free energy per AVF inference iteration (K+1 entries, prior first),
/// averaged over every step of every sequence.
inline std::vector<double> evaluate_avf_trace_means(const DynamicalModel& model,
                                                    const IterativeInferenceModel& infnet,
                                                    const InferenceSpec& spec,
                                                    const std::vector<std::vector<Tensor>>& seqs,
                                                    std::uint64_t seed, int threads = 1) {
    if (spec.kind != InferenceSpec::Kind::Avf) {
        throw InvalidArgument("evaluate_avf_trace_means: AVF strategy required");
    }
    const std::size_t entries = static_cast<std::size_t>(spec.avf_iterations) + 1;
    std::vector<std::vector<double>> partial(seqs.size(), std::vector<double>(entries, 0.0));
    std::vector<std::size_t> counts(seqs.size(), 0);
    detail::parallel_for(seqs.size(), threads, [&](std::size_t i) {
        Rng rng(sequence_stream_seed(seed, 0, i));
        FilterTrace trace = filter_sequence(model, spec, &infnet, seqs[i], rng, 1.0, false);
        for (const auto& step_trace : trace.avf_traces) {
            for (std::size_t j = 0; j < entries; ++j) partial[i][j] += step_trace[j].total;
        }
        counts[i] = trace.avf_traces.size();
    });
    std::vector<double> means(entries, 0.0);
    std::size_t total_steps = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        for (std::size_t j = 0; j < entries; ++j) means[j] += partial[i][j];
        total_steps += counts[i];
    }
    for (double& m : means) m /= static_cast<double>(total_steps);
    return means;
}

struct TrainHooks {
    std::function<void(int epoch, const std::string& split, const EpochMetrics&, double kl_weight,
                       double lr)>
        on_metrics;
};

/// Full EM training loop with optional per-epoch validation.
inline void train(DynamicalModel& model, const InferenceSpec& spec,
                  IterativeInferenceModel* infnet,
                  const std::vector<std::vector<Tensor>>& train_data,
                  const std::vector<std::vector<Tensor>>& val_data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {}) {
    cfg.validate();
    std::vector<Var> trainable;
    if (cfg.train_model) {
        for (const auto& e : model.params().entries()) trainable.push_back(e.var);
    }
    if (spec.kind == InferenceSpec::Kind::Avf && infnet != nullptr) {
        for (const auto& e : infnet->params().entries()) trainable.push_back(e.var);
    }
    if (trainable.empty() && cfg.epochs > 0) {
        throw InvalidArgument("train: nothing to optimize");
    }
    Optimizer optimizer(cfg.optimizer);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const EpochMetrics m =
            train_epoch(model, spec, infnet, train_data, cfg, epoch, optimizer, trainable);
        const double kl_w = kl_anneal_weight(epoch, cfg.kl_anneal_epochs);
        const double lr = cfg.learning_rate * std::pow(cfg.lr_decay_per_epoch, epoch);
        if (hooks.on_metrics) hooks.on_metrics(epoch, "train", m, kl_w, lr);
        const bool last = epoch + 1 == cfg.epochs;
        const bool do_eval = !val_data.empty() &&
                             ((cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) || last);
        if (do_eval && hooks.on_metrics) {
            const EpochMetrics v = evaluate(model, spec, infnet, val_data,
                                            Rng::sub_seed(cfg.seed, 0xeba1ULL), cfg.threads);
            hooks.on_metrics(epoch, "val", v, kl_w, lr);
        }
    }
}

}  // namespace varfilter
