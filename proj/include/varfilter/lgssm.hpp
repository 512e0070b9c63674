#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "varfilter/model.hpp"

namespace varfilter {

/**
 * Linear Gaussian state-space model:
 *
 *   z_1 ~ N(init_mean, diag(init_var)),   z_t ~ N(A z_{t-1}, diag(Q)),
 *   x_t ~ N(C z_t + b, diag(R)).
 *
 * Noise variances are stored as log-parameters so the whole model stays
 * positive under gradient updates. The recurrent state holds the previous
 * latent sample; the dynamics are Markov in the latent.
 */
class LinearGaussianSSM : public DynamicalModel {
public:
    LinearGaussianSSM(const Tensor& A, const Tensor& Q_diag, const Tensor& C, const Tensor& b,
                      const Tensor& R_diag, const Tensor& init_mean,
                      const Tensor& init_var_diag) {
        if (!A.is_matrix() || A.rows() != A.cols()) {
            throw InvalidArgument("LinearGaussianSSM: A must be square, got " + A.shape_string());
        }
        const std::size_t n = A.rows();
        if (!C.is_matrix() || C.cols() != n) {
            throw InvalidArgument("LinearGaussianSSM: C must be m x " + std::to_string(n) +
                                  ", got " + C.shape_string());
        }
        const std::size_t m = C.rows();
        auto check_vec = [](const Tensor& t, std::size_t len, const char* field) {
            if (!t.is_vector() || t.size() != len) {
                throw InvalidArgument(std::string("LinearGaussianSSM: ") + field + " must be a " +
                                      std::to_string(len) + "-vector, got " + t.shape_string());
            }
        };
        auto check_pos = [](const Tensor& t, const char* field) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                if (!(t[i] > 0.0)) {
                    throw InvalidArgument(std::string("LinearGaussianSSM: ") + field +
                                          " must be strictly positive, entry " +
                                          std::to_string(i) + " is " + std::to_string(t[i]));
                }
            }
        };
        check_vec(Q_diag, n, "Q_diag");
        check_vec(b, m, "b");
        check_vec(R_diag, m, "R_diag");
        check_vec(init_mean, n, "init_mean");
        check_vec(init_var_diag, n, "init_var_diag");
        check_pos(Q_diag, "Q_diag");
        check_pos(R_diag, "R_diag");
        check_pos(init_var_diag, "init_var_diag");

        latent_dim_ = n;
        obs_dim_ = m;
        auto log_of = [](Tensor t) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::log(t[i]);
            return t;
        };
        A_ = params_.add("A", A);
        log_q_ = params_.add("log_q", log_of(Q_diag));
        C_ = params_.add("C", C);
        b_ = params_.add("b", b);
        log_r_ = params_.add("log_r", log_of(R_diag));
        init_mean_ = params_.add("init_mean", init_mean);
        log_init_var_ = params_.add("log_init_var", log_of(init_var_diag));
    }

    ModelState init_state() const override {
        ModelState s;
        s.hidden = Var::constant(Tensor({latent_dim_}), "z0");
        s.step_index = 0;
        return s;
    }

    DiagonalGaussian prior(const ModelState& state) const override {
        if (state.step_index == 0) {
            return DiagonalGaussian(init_mean_, log_init_var_);
        }
        return DiagonalGaussian(matmul(A_, state.hidden), log_q_);
    }

    OutputDistribution decode(const ModelState&, const Var& z) const override {
        if (z.size() != latent_dim_) {
            throw ShapeError("LinearGaussianSSM::decode: z " + z.value().shape_string() +
                             " vs latent dim " + std::to_string(latent_dim_));
        }
        return {DiagonalGaussian(affine(C_, z, b_), log_r_)};
    }

    ModelState update_state(const ModelState& state, const Var&, const Var& z) const override {
        ModelState next;
        next.hidden = z;
        next.step_index = state.step_index + 1;
        return next;
    }

    /// Exact one-step marginalization of the dynamics over a diagonal
    /// Gaussian belief on z_{t-1}: N(A m, diag(A Sigma A^T) + diag(Q)).
    /// Off-diagonal covariance is dropped, which is exact for diagonal A.
    DiagonalGaussian predictive_prior(const ModelState::Belief& prev) const {
        Var mean = matmul(A_, Var::constant(prev.mean, "belief_mean"));
        Var propagated = matmul(square(A_), Var::constant(prev.var, "belief_var"));
        Var var = add(propagated, exp(log_q_));
        return DiagonalGaussian(mean, log(var));
    }

    std::size_t latent_dim() const override { return latent_dim_; }
    std::size_t obs_dim() const override { return obs_dim_; }
    std::size_t hidden_dim() const override { return latent_dim_; }
    OutputFamily output_family() const override { return OutputFamily::Gaussian; }
    std::string kind() const override { return "lgssm"; }

    const ParamSet& params() const override { return params_; }
    ParamSet& params() override { return params_; }

    // Plain parameter values, primarily for the exact-filter oracle.
    Tensor A_values() const { return A_.value(); }
    Tensor C_values() const { return C_.value(); }
    Tensor b_values() const { return b_.value(); }
    Tensor Q_diag_values() const { return exp_values(log_q_); }
    Tensor R_diag_values() const { return exp_values(log_r_); }
    Tensor init_mean_values() const { return init_mean_.value(); }
    Tensor init_var_values() const { return exp_values(log_init_var_); }

    Var A_var() const { return A_; }
    Var C_var() const { return C_; }
    Var b_var() const { return b_; }
    Var log_r_var() const { return log_r_; }

private:
    static Tensor exp_values(const Var& v) {
        Tensor t = v.value();
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(t[i]);
        return t;
    }

    std::size_t latent_dim_ = 0;
    std::size_t obs_dim_ = 0;
    ParamSet params_;
    Var A_, log_q_, C_, b_, log_r_, init_mean_, log_init_var_;
};

inline std::unique_ptr<LinearGaussianSSM> make_lgssm(const Tensor& A, const Tensor& Q_diag,
                                                     const Tensor& C, const Tensor& b,
                                                     const Tensor& R_diag,
                                                     const Tensor& init_mean,
                                                     const Tensor& init_var_diag) {
    return std::make_unique<LinearGaussianSSM>(A, Q_diag, C, b, R_diag, init_mean, init_var_diag);
}

}  // namespace varfilter
