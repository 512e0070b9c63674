#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "varfilter/graph.hpp"

namespace varfilter {

namespace detail {

using EmitFn = std::function<void(std::size_t, Tensor)>;

inline Var make_node(std::string name, std::vector<Var> parents, Tensor value,
                     std::function<void(const Node&, const Tensor&, const EmitFn&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op_name = std::move(name);
    bool rg = false;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) {
        rg = rg || p.requires_grad();
        n->parents.push_back(p.node());
    }
    n->requires_grad = rg;
    if (rg) n->backward_fn = std::move(backward_fn);
    n->id = Node::next_id();
    return Var(n);
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shapes " + a.shape_string() + " and " +
                         b.shape_string() + " differ");
    }
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    if (x > 35.0) return x + std::exp(-x);
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return detail::make_node("add", {a, b}, std::move(out),
                             [](const Node&, const Tensor& g, const auto& emit) {
                                 emit(0, g);
                                 emit(1, g);
                             });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return detail::make_node("sub", {a, b}, std::move(out),
                             [](const Node&, const Tensor& g, const auto& emit) {
                                 emit(0, g);
                                 Tensor neg = g;
                                 neg.scale_(-1.0);
                                 emit(1, std::move(neg));
                             });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return detail::make_node("mul", {a, b}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 const Tensor& bv = self.parent_value(1);
                                 Tensor ga = g;
                                 Tensor gb = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     ga[i] *= bv[i];
                                     gb[i] *= av[i];
                                 }
                                 emit(0, std::move(ga));
                                 emit(1, std::move(gb));
                             });
}

inline Var negate(const Var& a) {
    Tensor out = a.value();
    out.scale_(-1.0);
    return detail::make_node("negate", {a}, std::move(out),
                             [](const Node&, const Tensor& g, const auto& emit) {
                                 Tensor ga = g;
                                 ga.scale_(-1.0);
                                 emit(0, std::move(ga));
                             });
}

inline Var square(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    return detail::make_node("square", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] *= 2.0 * av[i];
                                 emit(0, std::move(ga));
                             });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Var exp(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i]);
        if (!std::isfinite(out[i])) {
            throw NumericalError("exp: overflow at input " + std::to_string(a.value()[i]));
        }
    }
    return detail::make_node("exp", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     ga[i] *= self.value[i];
                                 }
                                 emit(0, std::move(ga));
                             });
}

inline Var log(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] <= 0.0) {
            throw DomainError("log: non-positive input " + std::to_string(out[i]));
        }
        out[i] = std::log(out[i]);
    }
    return detail::make_node("log", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] /= av[i];
                                 emit(0, std::move(ga));
                             });
}

inline Var tanh(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return detail::make_node("tanh", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     const double y = self.value[i];
                                     ga[i] *= 1.0 - y * y;
                                 }
                                 emit(0, std::move(ga));
                             });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(out[i]);
    return detail::make_node("sigmoid", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     const double y = self.value[i];
                                     ga[i] *= y * (1.0 - y);
                                 }
                                 emit(0, std::move(ga));
                             });
}

inline Var softplus(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_softplus(out[i]);
    return detail::make_node("softplus", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     ga[i] *= detail::stable_sigmoid(av[i]);
                                 }
                                 emit(0, std::move(ga));
                             });
}

inline Var elu(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] <= 0.0) out[i] = std::expm1(out[i]);
    }
    return detail::make_node("elu", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     // exp(x) = elu(x) + 1 on the negative branch
                                     if (av[i] <= 0.0) ga[i] *= self.value[i] + 1.0;
                                 }
                                 emit(0, std::move(ga));
                             });
}

/// Leaky ReLU (negative slope 0.1) clipped to [-3, 3]; zero gradient wherever
/// the clip is active.
inline Var clipped_leaky_relu(const Var& a) {
    constexpr double kSlope = 0.1;
    constexpr double kClip = 3.0;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double y = out[i] > 0.0 ? out[i] : kSlope * out[i];
        out[i] = std::min(std::max(y, -kClip), kClip);
    }
    return detail::make_node("clipped_leaky_relu", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     const double x = av[i];
                                     const double pre = x > 0.0 ? x : kSlope * x;
                                     if (pre <= -kClip || pre >= kClip) {
                                         ga[i] = 0.0;
                                     } else if (x <= 0.0) {
                                         ga[i] *= kSlope;
                                     }
                                 }
                                 emit(0, std::move(ga));
                             });
}

inline Var erf(const Var& a) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::erf(out[i]);
    return detail::make_node("erf", {a}, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 constexpr double kTwoOverSqrtPi = 1.1283791670955126;
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     ga[i] *= kTwoOverSqrtPi * std::exp(-av[i] * av[i]);
                                 }
                                 emit(0, std::move(ga));
                             });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Var clamp(const Var& a, double lo, double hi) {
    if (!(lo < hi)) throw InvalidArgument("clamp: lo must be < hi");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(out[i], lo), hi);
    return detail::make_node("clamp", {a}, std::move(out),
                             [lo, hi](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     if (!(av[i] > lo && av[i] < hi)) ga[i] = 0.0;
                                 }
                                 emit(0, std::move(ga));
                             });
}

/// max(x, floor) elementwise; the floor branch has zero gradient.
inline Var clamp_min(const Var& a, double lo) {
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], lo);
    return detail::make_node("clamp_min", {a}, std::move(out),
                             [lo](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& av = self.parent_value(0);
                                 Tensor ga = g;
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                     if (av[i] <= lo) ga[i] = 0.0;
                                 }
                                 emit(0, std::move(ga));
                             });
}

// ---------------------------------------------------------------------------
// Contractions, reductions, shape ops
// ---------------------------------------------------------------------------

/// Matrix-vector or matrix-matrix product.
inline Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.is_matrix() || (!bv.is_vector() && !bv.is_matrix())) {
        throw ShapeError("matmul: cannot multiply " + av.shape_string() + " by " +
                         bv.shape_string());
    }
    const std::size_t m = av.rows();
    const std::size_t n = av.cols();
    if (bv.is_vector()) {
        if (bv.size() != n) {
            throw ShapeError("matmul: cannot multiply " + av.shape_string() + " by " +
                             bv.shape_string());
        }
        Tensor out({m});
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += av.at(i, j) * bv[j];
            out[i] = s;
        }
        return detail::make_node(
            "matmul", {a, b}, std::move(out),
            [](const Node& self, const Tensor& g, const auto& emit) {
                const Tensor& as = self.parent_value(0);
                const Tensor& bs = self.parent_value(1);
                const std::size_t m = as.rows();
                const std::size_t n = as.cols();
                Tensor ga({m, n});
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) ga.at(i, j) = g[i] * bs[j];
                }
                Tensor gb({n});
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    for (std::size_t j = 0; j < n; ++j) gb[j] += as.at(i, j) * gi;
                }
                emit(0, std::move(ga));
                emit(1, std::move(gb));
            });
    }
    const std::size_t k = bv.cols();
    if (bv.rows() != n) {
        throw ShapeError("matmul: cannot multiply " + av.shape_string() + " by " +
                         bv.shape_string());
    }
    Tensor out({m, k});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += av.at(i, j) * bv.at(j, c);
            out.at(i, c) = s;
        }
    }
    return detail::make_node(
        "matmul", {a, b}, std::move(out),
        [](const Node& self, const Tensor& g, const auto& emit) {
            const Tensor& as = self.parent_value(0);
            const Tensor& bs = self.parent_value(1);
            const std::size_t m = as.rows();
            const std::size_t n = as.cols();
            const std::size_t k = bs.cols();
            Tensor ga({m, n});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < k; ++c) s += g.at(i, c) * bs.at(j, c);
                    ga.at(i, j) = s;
                }
            }
            Tensor gb({n, k});
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t c = 0; c < k; ++c) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) s += as.at(i, j) * g.at(i, c);
                    gb.at(j, c) = s;
                }
            }
            emit(0, std::move(ga));
            emit(1, std::move(gb));
        });
}

/// Concatenate vectors (scalars count as length-1) into one vector.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat: no inputs");
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.value().rank() > 1) {
            throw ShapeError("concat: expected vectors, got " + p.value().shape_string());
        }
        total += p.value().size();
    }
    Tensor out({total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        for (std::size_t i = 0; i < p.value().size(); ++i) out[off + i] = p.value()[i];
        off += p.value().size();
    }
    return detail::make_node("concat", parts, std::move(out),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 std::size_t off = 0;
                                 for (std::size_t p = 0; p < self.parents.size(); ++p) {
                                     const Tensor& pv = self.parent_value(p);
                                     Tensor gp(pv.shape());
                                     for (std::size_t i = 0; i < pv.size(); ++i) {
                                         gp[i] = g[off + i];
                                     }
                                     off += pv.size();
                                     emit(p, std::move(gp));
                                 }
                             });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
    return detail::make_node("sum", {a}, Tensor::scalar(s),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 emit(0, Tensor::full(self.parent_value(0).shape(), g[0]));
                             });
}

inline Var mean(const Var& a) {
    const std::size_t n = a.value().size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.value()[i];
    return detail::make_node("mean", {a}, Tensor::scalar(s / static_cast<double>(n)),
                             [](const Node& self, const Tensor& g, const auto& emit) {
                                 const Tensor& pv = self.parent_value(0);
                                 emit(0, Tensor::full(pv.shape(),
                                                      g[0] / static_cast<double>(pv.size())));
                             });
}

/// Expand a scalar to `shape`; the adjoint is the total over all positions.
inline Var broadcast(const Var& a, const std::vector<std::size_t>& shape) {
    if (a.value().size() != 1) {
        throw ShapeError("broadcast: only scalars broadcast, got " + a.value().shape_string());
    }
    return detail::make_node("broadcast", {a}, Tensor::full(shape, a.value()[0]),
                             [](const Node&, const Tensor& g, const auto& emit) {
                                 double s = 0.0;
                                 for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
                                 emit(0, Tensor::scalar(s));
                             });
}

// ---------------------------------------------------------------------------
// Sugar
// ---------------------------------------------------------------------------

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return negate(a); }

inline Var scale(const Var& a, double s) {
    return mul(a, broadcast(Var::constant_scalar(s), a.shape()));
}

inline Var shift(const Var& a, double c) {
    return add(a, broadcast(Var::constant_scalar(c), a.shape()));
}

inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator+(const Var& a, double c) { return shift(a, c); }
inline Var operator-(const Var& a, double c) { return shift(a, -c); }

/// W x + b.
inline Var affine(const Var& weight, const Var& x, const Var& bias) {
    return add(matmul(weight, x), bias);
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

/// (v - mean) / sqrt(population variance + eps), built from primitives so the
/// backward rule is inherited. Constant vectors map to (near) zero.
inline Var layer_normalize(const Var& v, double eps = kLayerNormEps) {
    if (!v.value().is_vector()) {
        throw ShapeError("layer_normalize: expected a vector, got " + v.value().shape_string());
    }
    if (eps < 0.0) throw InvalidArgument("layer_normalize: negative eps");
    const auto shape = v.shape();
    Var centered = sub(v, broadcast(mean(v), shape));
    Var variance = mean(square(centered));
    // 1/sqrt(var + eps) as exp(-log(var + eps) / 2); var + eps > 0 always.
    Var inv_std = exp(scale(log(shift(variance, eps)), -0.5));
    return mul(centered, broadcast(inv_std, shape));
}

// ---------------------------------------------------------------------------
// Dynamic dispatch over the registered op kinds
// ---------------------------------------------------------------------------

enum class OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Concat,
    Sum,
    Mean,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Elu,
    Square,
    Negate,
    Broadcast,
    ClippedLeakyRelu,
    Erf,
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Concat: return "concat";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Tanh: return "tanh";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Softplus: return "softplus";
        case OpKind::Elu: return "elu";
        case OpKind::Square: return "square";
        case OpKind::Negate: return "negate";
        case OpKind::Broadcast: return "broadcast";
        case OpKind::ClippedLeakyRelu: return "clipped_leaky_relu";
        case OpKind::Erf: return "erf";
    }
    return "?";
}

/// Uniform entry point over the primitive set. Broadcast takes the target
/// shape from a second input.
inline Var forward_op(OpKind kind, const std::vector<Var>& inputs) {
    auto arity = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw InvalidArgument(std::string("forward_op(") + op_kind_name(kind) + "): expected " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(inputs.size()));
        }
    };
    switch (kind) {
        case OpKind::Matmul: arity(2); return matmul(inputs[0], inputs[1]);
        case OpKind::Add: arity(2); return add(inputs[0], inputs[1]);
        case OpKind::Sub: arity(2); return sub(inputs[0], inputs[1]);
        case OpKind::Mul: arity(2); return mul(inputs[0], inputs[1]);
        case OpKind::Concat: return concat(inputs);
        case OpKind::Sum: arity(1); return sum(inputs[0]);
        case OpKind::Mean: arity(1); return mean(inputs[0]);
        case OpKind::Exp: arity(1); return exp(inputs[0]);
        case OpKind::Log: arity(1); return log(inputs[0]);
        case OpKind::Tanh: arity(1); return tanh(inputs[0]);
        case OpKind::Sigmoid: arity(1); return sigmoid(inputs[0]);
        case OpKind::Softplus: arity(1); return softplus(inputs[0]);
        case OpKind::Elu: arity(1); return elu(inputs[0]);
        case OpKind::Square: arity(1); return square(inputs[0]);
        case OpKind::Negate: arity(1); return negate(inputs[0]);
        case OpKind::Broadcast: arity(2); return broadcast(inputs[0], inputs[1].shape());
        case OpKind::ClippedLeakyRelu: arity(1); return clipped_leaky_relu(inputs[0]);
        case OpKind::Erf: arity(1); return erf(inputs[0]);
    }
    throw InvalidArgument("forward_op: unknown kind");
}

inline const std::vector<OpKind>& all_op_kinds() {
    static const std::vector<OpKind> kinds = {
        OpKind::Matmul, OpKind::Add,     OpKind::Sub,     OpKind::Mul,      OpKind::Concat,
        OpKind::Sum,    OpKind::Mean,    OpKind::Exp,     OpKind::Log,      OpKind::Tanh,
        OpKind::Sigmoid, OpKind::Softplus, OpKind::Elu,   OpKind::Square,   OpKind::Negate,
        OpKind::Broadcast, OpKind::ClippedLeakyRelu, OpKind::Erf,
    };
    return kinds;
}

}  // namespace varfilter
