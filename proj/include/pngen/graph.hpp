#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pngen/tensor.hpp"

namespace pngen::nn {

template <typename T>
class Graph;

// Named trainable tensor with gradient and optimizer slots. Owned by a
// ParamStore; graphs reference it through leaf nodes.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> opt_m;
    Tensor<T> opt_v;
    bool trainable = true;

    void zero_grad() {
        if (grad.shape != value.shape) grad = Tensor<T>::zeros(value.shape);
        std::fill(grad.data.begin(), grad.data.end(), T(0));
    }
};

template <typename T>
class ParamStore {
public:
    Param<T>* add(const std::string& name, Tensor<T> init) {
        check_contract(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
        auto p = std::make_unique<Param<T>>();
        p->name = name;
        p->value = std::move(init);
        p->grad = Tensor<T>::zeros(p->value.shape);
        index_[name] = items_.size();
        items_.push_back(std::move(p));
        return items_.back().get();
    }

    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }

    const std::vector<std::unique_ptr<Param<T>>>& all() const { return items_; }

    size_t size() const { return items_.size(); }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<Param<T>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Handle to a node on a Graph tape.
template <typename T>
struct Var {
    Graph<T>* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor<T>& val() const;
    const std::vector<int>& shape() const { return val().shape; }
    int64_t numel() const { return val().numel(); }
};

// Append-only reverse-mode tape. One Graph instance is built per forward
// pass and cleared afterwards; node order is a topological order by
// construction. When grads are disabled the tape still records values, so
// the same forward code serves training and inference.
template <typename T>
class Graph {
public:
    explicit Graph(bool grads_enabled = true) : grads_enabled_(grads_enabled) {}

    Var<T> constant(Tensor<T> v) {
        int id = add_node(std::move(v), false);
        return {this, id};
    }

    Var<T> leaf(Param<T>* p) {
        if (!grads_enabled_ || !p->trainable) return constant(p->value);
        int id = add_node(p->value, true);
        nodes_[static_cast<size_t>(id)].backward = [p, id](Graph& g) {
            const Tensor<T>& dy = g.grad_buf(id);
            if (p->grad.shape != p->value.shape) p->grad = Tensor<T>::zeros(p->value.shape);
            for (int64_t i = 0; i < dy.numel(); ++i) p->grad[i] += dy[i];
        };
        return {this, id};
    }

    int add_node(Tensor<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, nullptr,
                              requires_grad && grads_enabled_});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_backward(int id, std::function<void(Graph&)> fn) {
        if (nodes_[static_cast<size_t>(id)].requires_grad)
            nodes_[static_cast<size_t>(id)].backward = std::move(fn);
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor<T>& value(int id) { return nodes_[static_cast<size_t>(id)].value; }

    bool wants(int id) const { return id >= 0 && nodes_[static_cast<size_t>(id)].requires_grad; }
    bool grads_enabled() const { return grads_enabled_; }

    Tensor<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.shape != n.value.shape) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool has_grad(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.shape == n.value.shape;
    }

    void backward(const Var<T>& loss) {
        check_contract(loss.g == this, "backward: var belongs to another graph");
        check_contract(value(loss.id).numel() == 1, "backward: loss must be scalar");
        check_contract(grads_enabled_, "backward: graph built with grads disabled");
        grad_buf(loss.id)[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad || !n.backward) continue;
            if (!has_grad(id)) continue;  // not on the path to the loss
            n.backward(*this);
        }
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(Graph&)> backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    bool grads_enabled_;
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
    return g->value(id);
}

}  // namespace pngen::nn
