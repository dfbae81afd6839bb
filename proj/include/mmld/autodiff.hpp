#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmld/rng.hpp"
#include "mmld/tensor.hpp"

namespace mmld {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
    Parameter(std::string n, Shape s, std::size_t count) : name(std::move(n)), declared_shape(std::move(s)), declared_size(count) {}

    // Shape-only parameters (see ParamStore::shapes_only) keep empty tensors.
    Shape declared_shape;
    std::size_t declared_size = 0;
    void zero_grad() { grad.fill(T(0)); }
};

// Ordered, name-unique collection of parameters. Addresses are stable for the
// lifetime of the store, so models keep raw pointers into it.
template <typename T>
class ParamStore {
public:
    ParamStore() = default;
    // A shape-only store records names and shapes without allocating values;
    // useful for sizing models too large to materialize.
    static ParamStore shapes_only() {
        ParamStore ps;
        ps.allocate_ = false;
        return ps;
    }
    bool allocates() const { return allocate_; }
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Parameter<T>& add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        if (allocate_)
            params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value)));
        else
            params_.push_back(std::make_unique<Parameter<T>>(name, value.shape(), value.size()));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    // Gaussian init with the given std; deterministic in (rng state, call order).
    Parameter<T>& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
        if (!allocate_) return add_shape(name, std::move(shape));
        Tensor<T> v(std::move(shape));
        for (auto& x : v.data()) x = static_cast<T>(rng.normal() * stddev);
        return add(name, std::move(v));
    }

    Parameter<T>& add_const(const std::string& name, Shape shape, T value) {
        if (!allocate_) return add_shape(name, std::move(shape));
        return add(name, Tensor<T>(std::move(shape), value));
    }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Parameter<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    Parameter<T>& at(const std::string& name) {
        auto* p = find(name);
        if (!p) throw std::out_of_range("no parameter named " + name);
        return *p;
    }

    std::size_t size() const { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    std::size_t count_scalars() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += allocate_ ? p->value.size() : p->declared_size;
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

private:
    Parameter<T>& add_shape(const std::string& name, Shape shape) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        params_.push_back(std::make_unique<Parameter<T>>(name, std::move(shape), n));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
    bool allocate_ = true;
};

template <typename T>
class Tape;

// Handle to a node recorded on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return shape().at(i); }
    std::size_t rank() const { return shape().size(); }
};

// Single-use reverse-mode tape. Nodes are appended in evaluation order, so a
// reverse sweep over the node list is a valid topological order.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, false); }

    // Leaf whose gradient can be read back with grad() after backward().
    Var<T> input(Tensor<T> v, bool requires_grad = true) {
        return push(std::move(v), nullptr, requires_grad && grad_enabled_);
    }

    // Leaf aliasing a parameter's value; its gradient is accumulated into
    // p.grad by backward(). Repeated calls return the same node.
    Var<T> param(Parameter<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return Var<T>{this, it->second};
        Node n;
        n.external = &p.value;
        n.param = &p;
        n.requires_grad = grad_enabled_;
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        param_nodes_[&p] = id;
        return Var<T>{this, id};
    }

    const Tensor<T>& value(int id) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(id));
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
    bool requires_grad(const Var<T>& v) const { return v.valid() && requires_grad(v.id); }

    // Records an op output. The backward closure is kept only when some input
    // requires a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
    }

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
        if (!value.all_finite()) throw NumericError("non-finite value produced by a primitive");
        bool rg = false;
        if (grad_enabled_)
            for (const auto& v : inputs)
                if (v.valid()) rg = rg || requires_grad(v.id);
        return push(std::move(value), rg ? std::move(fn) : nullptr, rg);
    }

    // Gradient accumulator for a node, allocated as zeros on first use.
    Tensor<T>& grad_buffer(int id) {
        Node& n = nodes_.at(static_cast<std::size_t>(id));
        if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
        return n.grad;
    }

    void backward(const Var<T>& loss) {
        if (consumed_) throw std::logic_error("tape already consumed by a previous backward()");
        if (!grad_enabled_) throw std::logic_error("backward() on a tape recorded without gradients");
        if (loss.tape != this) throw std::invalid_argument("loss was not recorded on this tape");
        if (value(loss.id).size() != 1) throw ShapeError("backward() requires a scalar loss, got " + to_string(value(loss.id).shape()));
        consumed_ = true;
        if (!requires_grad(loss.id)) return;
        grad_buffer(loss.id).fill(T(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.empty()) continue;
            current_ = id;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param) {
                auto& dst = n.param->grad.vec();
                const auto& src = n.grad.vec();
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
            }
        }
    }

    // Gradient of the last backward() w.r.t. a leaf created by input().
    const Tensor<T>& grad(const Var<T>& v) {
        return grad_buffer(v.id);
    }

    std::size_t node_count() const { return nodes_.size(); }

    // Node whose backward closure is currently running; lets a closure read its
    // own output value.
    int current() const { return current_; }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var<T> push(Tensor<T> v, BackwardFn fn, bool rg) {
        if (consumed_) throw std::logic_error("cannot record on a consumed tape");
        Node n;
        n.owned = std::move(v);
        n.backward = std::move(fn);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<T>*, int> param_nodes_;
    bool grad_enabled_ = true;
    bool consumed_ = false;
    int current_ = -1;
};

}  // namespace mmld
