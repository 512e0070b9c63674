#pragma once

#include <cmath>

#include "varfilter/errors.hpp"
#include "varfilter/ops.hpp"
#include "varfilter/rng.hpp"

namespace varfilter {

constexpr double kLogTwoPi = 1.8378770664093453;  // log(2*pi)
constexpr double kProbFloor = 1e-12;              // floor before log() on bin masses

/// Independent Gaussian with unconstrained log-variance parameters. Both the
/// variational posterior parameters and the dynamics prior live here.
struct DiagonalGaussian {
    Var mean;
    Var log_var;

    DiagonalGaussian() = default;

    DiagonalGaussian(Var mean_in, Var log_var_in)
        : mean(std::move(mean_in)), log_var(std::move(log_var_in)) {
        if (!mean.value().same_shape(log_var.value())) {
            throw ShapeError("DiagonalGaussian: mean " + mean.value().shape_string() +
                             " vs log_var " + log_var.value().shape_string());
        }
        if (!mean.value().all_finite() || !log_var.value().all_finite()) {
            throw NumericalError("DiagonalGaussian: non-finite parameters");
        }
    }

    static DiagonalGaussian constants(Tensor mean, Tensor log_var) {
        return DiagonalGaussian(Var::constant(std::move(mean), "gauss_mean"),
                                Var::constant(std::move(log_var), "gauss_log_var"));
    }

    static DiagonalGaussian standard(std::size_t dim) {
        return constants(Tensor({dim}), Tensor({dim}));
    }

    std::size_t dim() const { return mean.size(); }

    Tensor variance_values() const {
        Tensor v = log_var.value();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(v[i]);
        return v;
    }
};

struct Bernoulli {
    Var logits;

    explicit Bernoulli(Var logits_in) : logits(std::move(logits_in)) {}

    std::size_t dim() const { return logits.size(); }
};

/// Gaussian whose density is integrated over data bins of width `bin_width`,
/// giving per-observation probabilities rather than densities.
struct DiscretizedGaussian {
    Var mean;
    Var log_var;
    double bin_width = 0.0;

    DiscretizedGaussian() = default;

    DiscretizedGaussian(Var mean_in, Var log_var_in, double bin_width_in)
        : mean(std::move(mean_in)), log_var(std::move(log_var_in)), bin_width(bin_width_in) {
        if (!mean.value().same_shape(log_var.value())) {
            throw ShapeError("DiscretizedGaussian: mean " + mean.value().shape_string() +
                             " vs log_var " + log_var.value().shape_string());
        }
        if (!(bin_width > 0.0)) {
            throw InvalidArgument("DiscretizedGaussian: bin_width must be positive");
        }
    }

    std::size_t dim() const { return mean.size(); }
};

// ---------------------------------------------------------------------------
// Log-probability kernels (all differentiable Vars)
// ---------------------------------------------------------------------------

inline Var gaussian_log_prob(const Var& x, const DiagonalGaussian& d) {
    if (!x.value().same_shape(d.mean.value())) {
        throw ShapeError("gaussian_log_prob: x " + x.value().shape_string() + " vs mean " +
                         d.mean.value().shape_string());
    }
    Var residual2 = square(sub(x, d.mean));
    Var precision = exp(negate(d.log_var));
    Var terms = shift(scale(add(d.log_var, mul(residual2, precision)), -0.5), -0.5 * kLogTwoPi);
    return sum(terms);
}

/// KL(q || p) for diagonal Gaussians, elementwise closed form.
inline Var gaussian_kl(const DiagonalGaussian& q, const DiagonalGaussian& p) {
    if (!q.mean.value().same_shape(p.mean.value())) {
        throw ShapeError("gaussian_kl: q dim " + q.mean.value().shape_string() + " vs p dim " +
                         p.mean.value().shape_string());
    }
    Var log_ratio = scale(sub(p.log_var, q.log_var), 0.5);
    Var numerator = add(exp(q.log_var), square(sub(q.mean, p.mean)));
    Var quad = scale(mul(numerator, exp(negate(p.log_var))), 0.5);
    return sum(shift(add(log_ratio, quad), -0.5));
}

/// z = mean + exp(log_var / 2) * noise; gradient reaches mean and log_var,
/// never the noise.
inline Var reparameterized_sample(const DiagonalGaussian& d, const Tensor& noise) {
    if (noise.size() != d.dim()) {
        throw ShapeError("reparameterized_sample: noise " + noise.shape_string() + " vs dim " +
                         std::to_string(d.dim()));
    }
    Var sigma = exp(scale(d.log_var, 0.5));
    return add(d.mean, mul(sigma, Var::constant(noise, "noise")));
}

/// Stable logit-space Bernoulli log-likelihood: sum_i [x_i l_i - softplus(l_i)].
inline Var bernoulli_log_prob(const Tensor& x, const Bernoulli& d) {
    if (x.size() != d.dim()) {
        throw ShapeError("bernoulli_log_prob: x " + x.shape_string() + " vs logits dim " +
                         std::to_string(d.dim()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] != 0.0 && x[i] != 1.0) {
            throw DomainError("bernoulli_log_prob: non-binary observation " +
                              std::to_string(x[i]));
        }
    }
    Var xc = Var::constant(x, "binary_obs");
    return sub(dot(xc, d.logits), sum(softplus(d.logits)));
}

/// Per-bin probability mass Phi(hi) - Phi(lo), floored at 1e-12 before log.
inline Var discretized_gaussian_log_prob(const Var& x, const DiscretizedGaussian& d) {
    if (!x.value().same_shape(d.mean.value())) {
        throw ShapeError("discretized_gaussian_log_prob: x " + x.value().shape_string() +
                         " vs mean " + d.mean.value().shape_string());
    }
    constexpr double kInvSqrt2 = 0.7071067811865476;
    const double half = 0.5 * d.bin_width;
    Var inv_std = exp(scale(d.log_var, -0.5));
    Var centered = sub(x, d.mean);
    Var upper = erf(scale(mul(shift(centered, half), inv_std), kInvSqrt2));
    Var lower = erf(scale(mul(shift(centered, -half), inv_std), kInvSqrt2));
    Var prob = scale(sub(upper, lower), 0.5);
    return sum(log(clamp_min(prob, kProbFloor)));
}

/// E_{z~q}[log N(x; C z + b, diag(R))], closed form; exact rather than
/// sampled, so it is the expectation itself that is differentiated.
inline Var expected_linear_gaussian_loglik(const Var& x, const Var& C, const Var& b,
                                           const Var& R_diag, const DiagonalGaussian& q) {
    for (std::size_t i = 0; i < R_diag.value().size(); ++i) {
        if (!(R_diag.value()[i] > 0.0)) {
            throw DomainError("expected_linear_gaussian_loglik: nonpositive R entry " +
                              std::to_string(R_diag.value()[i]));
        }
    }
    Var mean_pred = affine(C, q.mean, b);
    DiagonalGaussian predictive(mean_pred, log(R_diag));
    Var base = gaussian_log_prob(x, predictive);
    // (1/2) sum_j R_j^{-1} sum_k C_jk^2 Var_q[z_k]
    Var smeared = matmul(square(C), exp(q.log_var));
    Var correction = scale(dot(exp(negate(log(R_diag))), smeared), 0.5);
    return sub(base, correction);
}

// ---------------------------------------------------------------------------
// Plain-value helpers (no graph); used by samplers and oracles
// ---------------------------------------------------------------------------

inline double gaussian_logpdf(double x, double mean, double variance) {
    return -0.5 * (kLogTwoPi + std::log(variance) + (x - mean) * (x - mean) / variance);
}

inline double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)); }

}  // namespace varfilter
