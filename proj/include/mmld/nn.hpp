#pragma once

// Small layer wrappers binding named parameters to the primitive ops.

#include <cmath>
#include <string>

#include "mmld/ops.hpp"

namespace mmld::nn {

template <typename T>
struct Linear {
    Parameter<T>* w = nullptr;  // [din, dout]
    Parameter<T>* b = nullptr;  // [dout]

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::size_t din, std::size_t dout, Rng& rng, double gain = 1.0,
           bool bias = true) {
        w = &ps.add_normal(name + ".w", {din, dout}, gain / std::sqrt(static_cast<double>(din)), rng);
        if (bias) b = &ps.add_const(name + ".b", {dout}, T(0));
    }
    Var<T> operator()(Tape<T>& t, Var<T> x) const {
        return b ? ops::linear(x, t.param(*w), std::optional<Var<T>>(t.param(*b))) : ops::linear(x, t.param(*w));
    }
    std::size_t out_dim() const { return w->value.dim(1); }
};

template <typename T>
struct Conv1d {
    Parameter<T>* w = nullptr;  // [cout, cin, k]
    Parameter<T>* b = nullptr;
    int padding = 0;
    int stride = 1;

    Conv1d() = default;
    Conv1d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
           int stride_ = 1, double gain = 1.0)
        : padding(static_cast<int>(k / 2)), stride(stride_) {
        w = &ps.add_normal(name + ".w", {cout, cin, k}, gain / std::sqrt(static_cast<double>(cin * k)), rng);
        b = &ps.add_const(name + ".b", {cout}, T(0));
    }
    Var<T> operator()(Tape<T>& t, Var<T> x) const {
        return ops::conv1d(x, t.param(*w), std::optional<Var<T>>(t.param(*b)), padding, stride);
    }
};

template <typename T>
struct Conv2d {
    Parameter<T>* w = nullptr;  // [cout, cin, k, k]
    Parameter<T>* b = nullptr;
    int padding = 0;
    int stride = 1;

    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
           int stride_ = 1, double gain = 1.0)
        : padding(static_cast<int>(k / 2)), stride(stride_) {
        w = &ps.add_normal(name + ".w", {cout, cin, k, k}, gain / std::sqrt(static_cast<double>(cin * k * k)), rng);
        b = &ps.add_const(name + ".b", {cout}, T(0));
    }
    Var<T> operator()(Tape<T>& t, Var<T> x) const {
        return ops::conv2d(x, t.param(*w), std::optional<Var<T>>(t.param(*b)), padding, stride);
    }
};

template <typename T>
struct GroupNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(ParamStore<T>& ps, const std::string& name, std::size_t channels, int groups_) : groups(groups_) {
        gamma = &ps.add_const(name + ".gamma", {channels}, T(1));
        beta = &ps.add_const(name + ".beta", {channels}, T(0));
    }
    Var<T> operator()(Tape<T>& t, Var<T> x) const { return ops::group_norm(x, groups, t.param(*gamma), t.param(*beta)); }
};

template <typename T>
struct LayerNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim) {
        gamma = &ps.add_const(name + ".gamma", {dim}, T(1));
        beta = &ps.add_const(name + ".beta", {dim}, T(0));
    }
    Var<T> operator()(Tape<T>& t, Var<T> x) const { return ops::layer_norm(x, t.param(*gamma), t.param(*beta)); }
};

}  // namespace mmld::nn
