#pragma once

#include <cmath>
#include <vector>

#include "varfilter/lgssm.hpp"

namespace varfilter {

namespace linalg {

inline Tensor matmat(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            out.at(i, j) = s;
        }
    }
    return out;
}

inline Tensor matvec(const Tensor& a, const Tensor& v) {
    Tensor out({a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * v[k];
        out[i] = s;
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    }
    return out;
}

inline Tensor identity(std::size_t n) {
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
    return out;
}

inline void symmetrize(Tensor& a) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            const double v = 0.5 * (a.at(i, j) + a.at(j, i));
            a.at(i, j) = v;
            a.at(j, i) = v;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
inline Tensor cholesky(const Tensor& a) {
    const std::size_t n = a.rows();
    Tensor L({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= L.at(i, k) * L.at(j, k);
            if (i == j) {
                if (!(s > 1e-300)) {
                    throw NumericalError("cholesky: matrix not positive definite (pivot " +
                                         std::to_string(s) + ")");
                }
                L.at(i, i) = std::sqrt(s);
            } else {
                L.at(i, j) = s / L.at(j, j);
            }
        }
    }
    return L;
}

/// Solve A x = v using a precomputed Cholesky factor of A.
inline Tensor cholesky_solve(const Tensor& L, const Tensor& v) {
    const std::size_t n = L.rows();
    Tensor y({n});
    for (std::size_t i = 0; i < n; ++i) {
        double s = v[i];
        for (std::size_t k = 0; k < i; ++k) s -= L.at(i, k) * y[k];
        y[i] = s / L.at(i, i);
    }
    Tensor x({n});
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= L.at(k, ii) * x[k];
        x[ii] = s / L.at(ii, ii);
    }
    return x;
}

inline double cholesky_log_det(const Tensor& L) {
    double s = 0.0;
    for (std::size_t i = 0; i < L.rows(); ++i) s += std::log(L.at(i, i));
    return 2.0 * s;
}

/// log N(x; mean, cov) for dense SPD covariance.
inline double gaussian_logpdf_full(const Tensor& x, const Tensor& mean, const Tensor& cov) {
    const std::size_t n = x.size();
    Tensor resid({n});
    for (std::size_t i = 0; i < n; ++i) resid[i] = x[i] - mean[i];
    const Tensor L = cholesky(cov);
    const Tensor solved = cholesky_solve(L, resid);
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) quad += resid[i] * solved[i];
    return -0.5 * (static_cast<double>(n) * kLogTwoPi + cholesky_log_det(L) + quad);
}

}  // namespace linalg

/// Filtered Gaussian belief: mean and full covariance.
struct KalmanBelief {
    Tensor mean;
    Tensor cov;
};

inline KalmanBelief kalman_initial_belief(const LinearGaussianSSM& model) {
    const Tensor init_var = model.init_var_values();
    Tensor cov({init_var.size(), init_var.size()});
    for (std::size_t i = 0; i < init_var.size(); ++i) cov.at(i, i) = init_var[i];
    return {model.init_mean_values(), cov};
}

/// Time update: N(A m, A S A^T + diag(Q)).
inline KalmanBelief kalman_predict(const LinearGaussianSSM& model, const KalmanBelief& belief) {
    const Tensor A = model.A_values();
    const Tensor Q = model.Q_diag_values();
    Tensor cov = linalg::matmat(linalg::matmat(A, belief.cov), linalg::transpose(A));
    for (std::size_t i = 0; i < Q.size(); ++i) cov.at(i, i) += Q[i];
    linalg::symmetrize(cov);
    return {linalg::matvec(A, belief.mean), std::move(cov)};
}

/**
 * Measurement update with the prediction-error decomposition of the step
 * log-likelihood: log p(x_t | x_{<t}) = log N(x; C m + b, C S C^T + diag(R)).
 * Joseph-form covariance update keeps the result symmetric PD.
 */
inline std::pair<KalmanBelief, double> kalman_update(const LinearGaussianSSM& model,
                                                     const KalmanBelief& predicted,
                                                     const Tensor& x) {
    const Tensor C = model.C_values();
    const Tensor b = model.b_values();
    const Tensor R = model.R_diag_values();
    const std::size_t n = predicted.mean.size();
    const std::size_t m = C.rows();
    if (x.size() != m) {
        throw ShapeError("kalman_update: observation " + x.shape_string() + " vs obs dim " +
                         std::to_string(m));
    }

    const Tensor Ct = linalg::transpose(C);
    const Tensor SCt = linalg::matmat(predicted.cov, Ct);  // n x m
    Tensor innovation_cov = linalg::matmat(C, SCt);        // m x m
    for (std::size_t i = 0; i < m; ++i) innovation_cov.at(i, i) += R[i];
    linalg::symmetrize(innovation_cov);

    Tensor innovation({m});
    const Tensor pred_obs = linalg::matvec(C, predicted.mean);
    for (std::size_t i = 0; i < m; ++i) innovation[i] = x[i] - pred_obs[i] - b[i];

    Tensor L;
    try {
        L = linalg::cholesky(innovation_cov);
    } catch (const NumericalError&) {
        throw NumericalError("kalman_update: innovation covariance numerically singular");
    }

    const double step_loglik =
        -0.5 * (static_cast<double>(m) * kLogTwoPi + linalg::cholesky_log_det(L)) -
        0.5 * [&] {
            const Tensor solved = linalg::cholesky_solve(L, innovation);
            double quad = 0.0;
            for (std::size_t i = 0; i < m; ++i) quad += innovation[i] * solved[i];
            return quad;
        }();

    // Gain K = S C^T S_inn^{-1}, column by column through the factor.
    Tensor gain({n, m});
    for (std::size_t j = 0; j < n; ++j) {
        Tensor row({m});
        for (std::size_t i = 0; i < m; ++i) row[i] = SCt.at(j, i);
        const Tensor solved = linalg::cholesky_solve(L, row);
        for (std::size_t i = 0; i < m; ++i) gain.at(j, i) = solved[i];
    }

    Tensor mean = predicted.mean;
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) mean[j] += gain.at(j, i) * innovation[i];
    }

    // Joseph form: (I - K C) S (I - K C)^T + K diag(R) K^T.
    Tensor ikc = linalg::identity(n);
    const Tensor KC = linalg::matmat(gain, C);
    for (std::size_t i = 0; i < n * n; ++i) ikc[i] -= KC[i];
    Tensor cov = linalg::matmat(linalg::matmat(ikc, predicted.cov), linalg::transpose(ikc));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) s += gain.at(i, k) * R[k] * gain.at(j, k);
            cov.at(i, j) += s;
        }
    }
    linalg::symmetrize(cov);

    return {{std::move(mean), std::move(cov)}, step_loglik};
}

struct KalmanResult {
    std::vector<KalmanBelief> posteriors;  // one filtered belief per step
    std::vector<double> step_loglik;       // log p(x_t | x_{<t})
    double total_loglik = 0.0;             // exact log p(x_{1:T})
};

/// Alternating predict/update from the initial prior; at t=1 the initial
/// prior itself is the prediction.
inline KalmanResult kalman_filter_sequence(const LinearGaussianSSM& model,
                                           const std::vector<Tensor>& xs) {
    if (xs.empty()) throw InvalidArgument("kalman_filter_sequence: empty sequence");
    KalmanResult result;
    result.posteriors.reserve(xs.size());
    result.step_loglik.reserve(xs.size());
    KalmanBelief belief = kalman_initial_belief(model);
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const KalmanBelief predicted = (t == 0) ? belief : kalman_predict(model, belief);
        auto [posterior, loglik] = kalman_update(model, predicted, xs[t]);
        belief = posterior;
        result.posteriors.push_back(std::move(posterior));
        result.step_loglik.push_back(loglik);
        result.total_loglik += loglik;
    }
    return result;
}

}  // namespace varfilter
