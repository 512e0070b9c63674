#pragma once

#include <cmath>
#include <vector>

#include "varfilter/graph.hpp"

namespace varfilter {

enum class OptimizerKind { AdaptiveMoments, PlainSgd };

inline const char* optimizer_kind_name(OptimizerKind k) {
    return k == OptimizerKind::AdaptiveMoments ? "adaptive_moments" : "plain_sgd";
}

/**
 * First-order optimizer over a fixed list of parameter leaves. The adaptive
 * variant is the usual bias-corrected moment scheme (beta1 0.9, beta2 0.999,
 * eps 1e-8); plain SGD is kept for literal gradient-descent runs.
 */
class Optimizer {
public:
    explicit Optimizer(OptimizerKind kind, double beta1 = 0.9, double beta2 = 0.999,
                       double eps = 1e-8)
        : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    OptimizerKind kind() const { return kind_; }

    /// One update with explicit gradients (same order as params).
    void step(double lr, const std::vector<Var>& params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size()) {
            throw InvalidArgument("Optimizer::step: params/grads size mismatch");
        }
        if (kind_ == OptimizerKind::PlainSgd) {
            for (std::size_t p = 0; p < params.size(); ++p) {
                Tensor& value = const_cast<Var&>(params[p]).mutable_value();
                for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * grads[p][i];
            }
            return;
        }
        if (m_.empty()) {
            for (const Var& p : params) {
                m_.push_back(Tensor::zeros_like(p.value()));
                v_.push_back(Tensor::zeros_like(p.value()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor& value = const_cast<Var&>(params[p]).mutable_value();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grads[p][i];
                m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g;
                v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g * g;
                value[i] -= lr * (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + eps_);
            }
        }
    }

    /// One update using the parameters' accumulated grad buffers.
    void step_from_grads(double lr, const std::vector<Var>& params) {
        std::vector<Tensor> grads;
        grads.reserve(params.size());
        for (const Var& p : params) grads.push_back(p.grad());
        step(lr, params, grads);
    }

private:
    OptimizerKind kind_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace varfilter
