#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "varfilter/errors.hpp"
#include "varfilter/tensor.hpp"

namespace varfilter {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/**
 * One vertex of the reverse-mode computation graph.
 *
 * A node owns its forward value, a persistent gradient accumulator, and the
 * backward rule that scatters an incoming adjoint to its parents. Ids are
 * globally monotone, so within any single graph a node's id is strictly
 * greater than the ids of all its ancestors; backward exploits this to walk
 * nodes in reverse topological order without an explicit sort key.
 */
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily except for requires-grad leaves
    std::vector<NodePtr> parents;
    // Receives the node itself (for its value and parents) and the incoming
    // adjoint, and emits one contribution per parent. Reading inputs through
    // `self` avoids copying operand tensors into every closure.
    std::function<void(const Node& self, const Tensor& adjoint,
                       const std::function<void(std::size_t, Tensor)>& emit)>
        backward_fn;
    std::string op_name;
    bool requires_grad = false;
    std::uint64_t id = 0;

    const Tensor& parent_value(std::size_t i) const { return parents[i]->value; }

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }
};

/// Gradients of one backward pass, keyed by node id.
using GradientMap = std::unordered_map<std::uint64_t, Tensor>;

/**
 * Value-semantics handle to a graph node. Copying a Var aliases the node.
 */
class Var {
public:
    Var() = default;

    explicit Var(NodePtr node) : node_(std::move(node)) {}

    /// Leaf holding a constant; backward never propagates into it.
    static Var constant(Tensor value, std::string name = "const") {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->op_name = std::move(name);
        n->requires_grad = false;
        n->id = Node::next_id();
        return Var(n);
    }

    static Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    /// Leaf participating in differentiation; grad starts at zeros.
    static Var parameter(Tensor value, std::string name = "param") {
        auto n = std::make_shared<Node>();
        n->grad = Tensor::zeros_like(value);
        n->value = std::move(value);
        n->op_name = std::move(name);
        n->requires_grad = true;
        n->id = Node::next_id();
        return Var(n);
    }

    bool defined() const { return node_ != nullptr; }

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }

    /// Accumulated gradient; zeros if backward never reached this node.
    const Tensor& grad() const {
        if (node_->grad.empty() && !node_->value.empty()) {
            node_->grad = Tensor::zeros_like(node_->value);
        }
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(0.0);
    }

    bool requires_grad() const { return node_->requires_grad; }
    std::uint64_t id() const { return node_->id; }
    const std::string& op_name() const { return node_->op_name; }
    const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }

    double scalar_value() const { return node_->value.scalar_value(); }

    /// New constant leaf with a copy of this node's value: severs the graph.
    Var detach() const { return constant(node_->value, "detach"); }

    NodePtr node() const { return node_; }
    Node* raw() const { return node_.get(); }

private:
    NodePtr node_;
};

namespace detail {

/// Collects every ancestor of `root` once, then orders by descending id,
/// which is a valid reverse topological order (ids grow monotonically and
/// every parent predates its children). Iterative to survive deep graphs.
inline std::vector<Node*> ancestors_reverse_topo(Node* root) {
    std::vector<Node*> order;
    std::unordered_map<Node*, bool> seen;
    std::vector<Node*> stack{root};
    seen.reserve(1024);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        auto [it, inserted] = seen.emplace(n, true);
        if (!inserted) continue;
        order.push_back(n);
        for (const NodePtr& p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
    return order;
}

}  // namespace detail

/**
 * Reverse-mode pass from a scalar loss.
 *
 * Adjoints are computed in a pass-local map, so concurrent backward calls on
 * graphs sharing parameter leaves never race; `accumulate` additionally adds
 * each adjoint into the node's persistent grad buffer (the default single
 * threaded behaviour). Returns the adjoints of every requires-grad ancestor,
 * keyed by node id.
 */
inline GradientMap backward(const Var& loss, bool accumulate = true) {
    if (!loss.defined()) throw InvalidArgument("backward: undefined loss");
    if (loss.value().size() != 1) {
        throw InvalidArgument("backward: loss must be scalar, got shape " +
                              loss.value().shape_string());
    }
    Node* root = loss.raw();
    std::unordered_map<Node*, Tensor> adjoint;
    adjoint.reserve(1024);
    adjoint[root] = Tensor::full(root->value.shape(), 1.0);

    GradientMap result;
    if (!root->requires_grad) {
        // Constant loss: nothing upstream can receive gradient.
        return result;
    }

    const std::vector<Node*> order = detail::ancestors_reverse_topo(root);
    result.reserve(order.size());
    for (Node* n : order) {
        auto it = adjoint.find(n);
        if (it == adjoint.end()) continue;  // not actually reached (pruned branch)
        Tensor a = std::move(it->second);
        adjoint.erase(it);
        if (n->backward_fn) {
            n->backward_fn(*n, a, [&](std::size_t parent_index, Tensor contribution) {
                Node* p = n->parents.at(parent_index).get();
                if (!p->requires_grad) return;
                auto [slot, inserted] = adjoint.try_emplace(p, std::move(contribution));
                if (!inserted) slot->second.add_(contribution);
            });
        }
        if (accumulate) {
            if (n->grad.empty()) n->grad = Tensor::zeros_like(n->value);
            n->grad.add_(a);
        }
        result.emplace(n->id, std::move(a));
    }
    return result;
}

/// backward() variant that leaves every node's grad buffer untouched; used
/// when several threads differentiate graphs sharing parameters.
inline GradientMap backward_detached(const Var& loss) { return backward(loss, false); }

/**
 * Named collection of trainable leaves; the unit of optimization, gradient
 * reduction and checkpointing. Order is insertion order and is part of the
 * reproducibility contract.
 */
class ParamSet {
public:
    Var add(const std::string& name, Tensor init) {
        for (const auto& e : entries_) {
            if (e.name == name) throw InvalidArgument("ParamSet: duplicate name '" + name + "'");
        }
        Var v = Var::parameter(std::move(init), name);
        entries_.push_back({name, v});
        return v;
    }

    struct Entry {
        std::string name;
        Var var;
    };

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    Var find(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return e.var;
        }
        throw InvalidArgument("ParamSet: no parameter named '" + name + "'");
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.zero_grad();
    }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.var.size();
        return n;
    }

    /// Append the other set's entries (used to optimize theta and phi jointly).
    void append(const ParamSet& other) {
        for (const auto& e : other.entries_) {
            for (const auto& mine : entries_) {
                if (mine.name == e.name) {
                    throw InvalidArgument("ParamSet: duplicate name '" + e.name + "' in append");
                }
            }
            entries_.push_back(e);
        }
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace varfilter
