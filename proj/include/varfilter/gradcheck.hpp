#pragma once

#include <cmath>
#include <functional>

#include "varfilter/graph.hpp"
#include "varfilter/ops.hpp"

namespace varfilter {

namespace detail {

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

}  // namespace detail

/**
 * Central-difference check of the reverse-mode gradient of a scalar function.
 *
 * `f` must be deterministic given the same input (fix any sampling noise with
 * common random numbers before calling). Returns the max over coordinates of
 * |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
 */
inline double finite_difference_check(const std::function<Var(const Var&)>& f,
                                      const Tensor& params, double eps) {
    if (eps <= 0.0) throw InvalidArgument("finite_difference_check: eps must be positive");
    Var leaf = Var::parameter(params, "fd_param");
    Var loss = f(leaf);
    backward(loss);
    const Tensor analytic = leaf.grad();

    double worst = 0.0;
    Tensor point = params;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + eps;
        const double up = f(Var::constant(point)).value().scalar_value();
        point[i] = saved - eps;
        const double down = f(Var::constant(point)).value().scalar_value();
        point[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst, detail::relative_error(analytic[i], numeric));
    }
    return worst;
}

/**
 * Same check against every coordinate of every parameter in a set. `build`
 * re-evaluates the scalar objective from the parameters' current values, so
 * perturbations flow through naturally; values are restored afterwards.
 */
inline double finite_difference_check_params(const std::function<Var()>& build, ParamSet& params,
                                             double eps) {
    if (eps <= 0.0) throw InvalidArgument("finite_difference_check: eps must be positive");
    params.zero_grad();
    Var loss = build();
    backward(loss);

    double worst = 0.0;
    for (auto& entry : params.entries()) {
        const Tensor analytic = entry.var.grad();
        Tensor& values = const_cast<Var&>(entry.var).mutable_value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = build().value().scalar_value();
            values[i] = saved - eps;
            const double down = build().value().scalar_value();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            worst = std::max(worst, detail::relative_error(analytic[i], numeric));
        }
    }
    return worst;
}

}  // namespace varfilter
