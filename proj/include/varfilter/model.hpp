#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "varfilter/distributions.hpp"
#include "varfilter/graph.hpp"
#include "varfilter/rng.hpp"

namespace varfilter {

enum class OutputFamily { Gaussian, Bernoulli, DiscretizedGaussian };

inline const char* output_family_name(OutputFamily f) {
    switch (f) {
        case OutputFamily::Gaussian: return "gaussian";
        case OutputFamily::Bernoulli: return "bernoulli";
        case OutputFamily::DiscretizedGaussian: return "discretized_gaussian";
    }
    return "?";
}

/// Conditional likelihood p(x_t | .) emitted by a model's decoder.
struct OutputDistribution {
    std::variant<DiagonalGaussian, Bernoulli, DiscretizedGaussian> dist;

    Var log_prob(const Tensor& x) const {
        if (const auto* g = std::get_if<DiagonalGaussian>(&dist)) {
            return gaussian_log_prob(Var::constant(x, "obs"), *g);
        }
        if (const auto* b = std::get_if<Bernoulli>(&dist)) {
            return bernoulli_log_prob(x, *b);
        }
        return discretized_gaussian_log_prob(Var::constant(x, "obs"),
                                             std::get<DiscretizedGaussian>(dist));
    }

    Tensor sample(Rng& rng) const {
        if (const auto* g = std::get_if<DiagonalGaussian>(&dist)) {
            Tensor out({g->dim()});
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = g->mean.value()[i] +
                         std::exp(0.5 * g->log_var.value()[i]) * rng.normal();
            }
            return out;
        }
        if (const auto* b = std::get_if<Bernoulli>(&dist)) {
            Tensor out({b->dim()});
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = rng.bernoulli(detail::stable_sigmoid(b->logits.value()[i])) ? 1.0 : 0.0;
            }
            return out;
        }
        const auto& d = std::get<DiscretizedGaussian>(dist);
        Tensor out({d.dim()});
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = d.mean.value()[i] + std::exp(0.5 * d.log_var.value()[i]) * rng.normal();
        }
        return out;
    }
};

/**
 * The recurrent conditioning context of a model at one step.
 *
 * `hidden` summarizes (x_{<t}, z_{<t}); for the linear Gaussian model it is
 * simply the previous latent sample. `belief` carries the previous step's
 * filtered posterior as plain values; it is maintained by the filtering loop
 * and consumed only by exact-expectation inference on linear models.
 */
struct ModelState {
    Var hidden;
    int step_index = 0;

    struct Belief {
        Tensor mean;
        Tensor var;
    };
    std::optional<Belief> belief;
};

/// Generative model interface following the prior / decoder / recurrence
/// decomposition of an auto-regressive latent variable model.
class DynamicalModel {
public:
    virtual ~DynamicalModel() = default;

    virtual ModelState init_state() const = 0;

    /// Dynamics model p(z_t | x_{<t}, z_{<t}) given the state before step t.
    virtual DiagonalGaussian prior(const ModelState& state) const = 0;

    /// Observation model p(x_t | x_{<t}, z_{<=t}).
    virtual OutputDistribution decode(const ModelState& state, const Var& z) const = 0;

    /// Fold (x_t, z_t) into the recurrent state; step_index increments by 1.
    virtual ModelState update_state(const ModelState& state, const Var& x,
                                    const Var& z) const = 0;

    virtual std::size_t latent_dim() const = 0;
    virtual std::size_t obs_dim() const = 0;
    virtual std::size_t hidden_dim() const = 0;
    virtual OutputFamily output_family() const = 0;
    virtual std::string kind() const = 0;

    virtual const ParamSet& params() const = 0;
    virtual ParamSet& params() = 0;
};

// ---------------------------------------------------------------------------
// Generic model helpers
// ---------------------------------------------------------------------------

struct SampledSequence {
    std::vector<Tensor> observations;
    std::vector<Tensor> latents;
};

/// Ancestral sampling: prior -> z -> decode -> x -> state update, T times.
inline SampledSequence sample_sequence(const DynamicalModel& model, std::size_t T, Rng& rng) {
    SampledSequence out;
    out.observations.reserve(T);
    out.latents.reserve(T);
    ModelState state = model.init_state();
    for (std::size_t t = 0; t < T; ++t) {
        const DiagonalGaussian prior = model.prior(state);
        Tensor z({model.latent_dim()});
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = prior.mean.value()[i] + std::exp(0.5 * prior.log_var.value()[i]) * rng.normal();
        }
        Var zc = Var::constant(z, "z_sample");
        const Tensor x = model.decode(state, zc).sample(rng);
        state = model.update_state(state, Var::constant(x, "x_sample"), zc);
        out.observations.push_back(x);
        out.latents.push_back(z);
    }
    return out;
}

/// log p(x_{1:T}, z_{1:T}) evaluated in one sweep along the model's own state
/// recursion. Serves as the monolithic route when checking the per-step
/// decomposition of the free energy.
inline double joint_log_prob(const DynamicalModel& model, const std::vector<Tensor>& xs,
                             const std::vector<Tensor>& zs) {
    if (xs.size() != zs.size() || xs.empty()) {
        throw InvalidArgument("joint_log_prob: need equal, non-zero sequence lengths");
    }
    double total = 0.0;
    ModelState state = model.init_state();
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const DiagonalGaussian prior = model.prior(state);
        Var zc = Var::constant(zs[t], "z");
        total += gaussian_log_prob(zc, prior).value().scalar_value();
        total += model.decode(state, zc).log_prob(xs[t]).value().scalar_value();
        state = model.update_state(state, Var::constant(xs[t], "x"), zc);
    }
    return total;
}

}  // namespace varfilter
